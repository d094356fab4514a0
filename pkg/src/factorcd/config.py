"""Sectioned key/value run configuration (INI syntax, unknown keys rejected)."""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .decoder import DecoderConfig, TransitionModel
from .evalharness import TABLE1_ROWS, TABLE3_ROWS, ExperimentConfig, GridSpec, ModelRow
from .factormodel import DECOMPOSITIONS, ModelDims, StagePlan, TrainConfig
from .synthcorpus import GeneratorConfig


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_or_inf(text: str) -> float:
    return float("inf") if text.strip().lower() in ("inf", "none") else float(text)


def _opt_words(text: str) -> tuple[str, ...] | None:
    return None if text.strip().lower() in ("", "all", "none") else _words(text)


# section -> key -> parser
SCHEMA: dict[str, dict[str, Any]] = {
    "run": {"seed": int, "out_dir": str, "decomposition": str},
    "generator": {"n_phonemes": int, "dim": int, "n_words": int, "word_length": _ints, "alpha": float,
                  "noise": float, "mean_duration": float, "silence_duration": float, "silence_prob": float,
                  "utterance_words": _ints, "bigram_concentration": float, "seed": int,
                  "n_train": int, "n_dev": int, "n_test": int},
    "model": {"context_window": int, "encoder_hidden": _ints, "head_hidden": int, "emb_left": int,
              "emb_right": int, "emb_center": int, "dropout": float},
    "stages": {"plan": _words, "include_right_branch": _bool, "monophone_epochs": int,
               "diphone_epochs": int, "triphone_epochs": int},
    "train": {"batch_size": int, "gamma": float, "lr": float, "lr_floor": float, "lr_decay": float,
              "l2": float, "gradient_noise": _bool, "noise_variance": float, "nesterov": _bool, "epochs": int},
    "priors": {"floor": float, "max_utterances": int},
    "decoder": {"beam": int, "score_beam": _float_or_inf, "lm_scale": float, "prior_scale": float,
                "word_end_beam": _float_or_inf, "within_word_context_only": _bool, "factors": _opt_words,
                "loop": float, "silence_loop": float},
    "grid": {"prior_scales": _floats, "lm_scales": _floats, "per_factor": _bool},
    "paths": {"data_dir": str, "model": str, "priors": str, "report_dir": str, "lm": str},
    "comparison": {"rows": _words, "seeds": _ints},
}

ROW_SETS = {"table1": TABLE1_ROWS, "table3": TABLE3_ROWS}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # section -> {key: parsed value}
    source: str = "<defaults>"

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    @property
    def seed(self) -> int:
        return self.get("run", "seed", 0)

    @property
    def out_dir(self) -> Path:
        return Path(self.get("run", "out_dir", "out"))

    @property
    def decomposition(self) -> str:
        return self.get("run", "decomposition", "tri-forward")

    def path(self, key: str) -> Path:
        defaults = {"data_dir": "data", "model": "model.npz", "priors": "priors.txt", "report_dir": "report"}
        if key == "lm" and self.get("paths", "lm") is None:
            return self.path("data_dir") / "lm.arpa"
        p = Path(self.get("paths", key) or defaults[key])
        return p if p.is_absolute() else self.out_dir / p

    def generator(self) -> GeneratorConfig:
        kw = {k: v for k, v in self.values.get("generator", {}).items() if k not in ("n_train", "n_dev", "n_test")}
        kw.setdefault("seed", self.seed)
        return GeneratorConfig(**kw)

    def split_sizes(self) -> dict[str, int]:
        g = self.values.get("generator", {})
        return {"train": g.get("n_train", 2000), "dev": g.get("n_dev", 200), "test": g.get("n_test", 200)}

    def dims(self) -> ModelDims:
        return ModelDims(**self.values.get("model", {}))

    def train(self) -> TrainConfig:
        return TrainConfig(**{**self.values.get("train", {}), "seed": self.seed})

    def stage_plan(self) -> StagePlan:
        s = self.values.get("stages", {})
        epochs = {name: s[f"{name}_epochs"] for name in ("monophone", "diphone", "triphone")
                  if f"{name}_epochs" in s}
        return StagePlan(tuple(s.get("plan", ())), epochs, s.get("include_right_branch", False))

    def decoder(self) -> DecoderConfig:
        d = dict(self.values.get("decoder", {}))
        tm = TransitionModel(d.pop("loop", 0.5), d.pop("silence_loop", 0.8))
        if "prior_scale" in d:
            d["prior_scales"] = d.pop("prior_scale")
        return DecoderConfig(transitions=tm, **d)

    def grid(self) -> GridSpec:
        return GridSpec(**self.values.get("grid", {}))

    def rows(self) -> list[ModelRow]:
        names = self.get("comparison", "rows", ("table3",))
        rows: list[ModelRow] = []
        known = {r.name: r for r in TABLE1_ROWS + TABLE3_ROWS}
        for n in names:
            if n in ROW_SETS:
                rows += [r for r in ROW_SETS[n] if r.name not in {x.name for x in rows}]
            elif n in known:
                rows.append(known[n])
            elif n in DECOMPOSITIONS:
                rows.append(ModelRow(n, n))
            else:
                raise ConfigError(f"[comparison] rows: unknown row {n!r}")
        names_present = {r.name for r in rows}
        for r in rows:
            if r.source and r.source not in names_present:
                raise ConfigError(f"[comparison] row {r.name!r} needs row {r.source!r} in the same run")
        return rows

    def experiment(self) -> ExperimentConfig:
        sizes = self.split_sizes()
        stage_epochs = self.stage_plan().epochs
        return ExperimentConfig(generator=self.generator(), n_train=sizes["train"], n_dev=sizes["dev"],
                                n_test=sizes["test"], dims=self.dims(), train=self.train(),
                                stage_epochs=stage_epochs, decoder=self.decoder(), grid=self.grid(),
                                prior_utterances=self.get("priors", "max_utterances", 500),
                                seeds=self.get("comparison", "seeds", (self.seed,)), rows=self.rows())

    def resolved(self) -> dict:
        """Every effective setting, for logging."""
        out = {
            "seed": self.seed, "out_dir": str(self.out_dir), "decomposition": self.decomposition,
            "generator": dataclasses.asdict(self.generator()), "splits": self.split_sizes(),
            "model": dataclasses.asdict(self.dims()), "train": dataclasses.asdict(self.train()),
            "stages": dataclasses.asdict(self.stage_plan()), "decoder": dataclasses.asdict(self.decoder()),
            "grid": dataclasses.asdict(self.grid()),
            "priors": {"floor": self.get("priors", "floor", 1e-6),
                       "max_utterances": self.get("priors", "max_utterances", 500)},
        }
        return json.loads(json.dumps(out, default=str))

    def validate(self) -> None:
        if self.decomposition not in DECOMPOSITIONS:
            raise ConfigError(f"[run] decomposition: unknown tag {self.decomposition!r} "
                              f"(expected one of {', '.join(DECOMPOSITIONS)})")
        try:
            self.generator()
            self.dims()
            self.train()
            self.decoder()
            self.grid()
            self.stage_plan().resolve(self.decomposition)
            if "comparison" in self.values:
                self.rows()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{self.source}: {e}") from None


def parse_config(text: str, source: str = "<string>", overrides: list[str] | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    raw: dict[str, dict[str, str]] = {s: dict(cp.items(s)) for s in cp.sections()}
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        raw.setdefault(section, {})[name] = value.strip()
    values: dict[str, dict] = {}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, text_value in items.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                values.setdefault(section, {})[key] = SCHEMA[section][key](text_value)
            except ValueError as e:
                raise ConfigError(f"{source}: [{section}] {key} = {text_value!r}: {e}") from None
    cfg = RunConfig(values, source)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    if path is None:
        return parse_config("", "<defaults>", overrides)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p), overrides)
