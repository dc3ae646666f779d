"""Flat key=value config files for experiments and data generation.

Both file kinds share one syntax: ``key = value`` lines, ``#`` comments, and
dotted namespaces. A generation spec either uses bare site keys (one site) or
``site_a.`` / ``site_b.`` groups (two sites). An experiment config adds
``out``, optional ``data.dir``, and ``model.`` / ``train.`` groups. Every key
is validated; unknown or duplicate keys are rejected by name.
"""

from dataclasses import dataclass, field
from pathlib import Path

from .data import SiteSpec
from .model import NORM_MODES, ModelConfig
from .train import MODES, ConfigError, TrainConfig


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_list(s):
    return tuple(int(p.strip()) for p in s.split(","))


SITE_KEYS = {
    "contrast_scale": float,
    "brightness_offset": float,
    "noise_sigma": float,
    "lesion_intensity": float,
    "lesion_count_min": int,
    "lesion_count_max": int,
    "lesion_radius_min": float,
    "lesion_radius_max": float,
    "background_texture_seed": int,
    "n_per_class": int,
    "seed": int,
}

MODEL_KEYS = {
    "input_size": _parse_int_list,
    "stem_channels": int,
    "upper_channels": _parse_int_list,
    "lower_blocks": int,
    "block_layers": int,
    "growth": int,
    "norm_mode": str,
    "use_gap": _parse_bool,
    "num_classes": int,
    "head_dims": _parse_int_list,
    "bn_momentum": float,
    "bn_epsilon": float,
}

TRAIN_KEYS = {
    "mode": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lr_min": float,
    "alpha": float,
    "tau": float,
    "denominator_mode": str,
    "seeds": _parse_int_list,
    "folds": int,
    "oversample_factor": int,
    "fold_seed": int,
}

# default two-site heterogeneity: brightness gap 0.3, contrast gap 1.5x,
# distinct noise levels and background texture families, 400 images per site;
# lesion strength sits just above the texture floor so neither site saturates
DEFAULT_SITE_A = {
    "contrast_scale": 1.0, "brightness_offset": 0.0, "noise_sigma": 0.08,
    "lesion_intensity": 0.2, "lesion_radius_min": 2.5, "lesion_radius_max": 4.5,
    "background_texture_seed": 101, "n_per_class": 200, "seed": 1001,
}
DEFAULT_SITE_B = {
    "contrast_scale": 1.5, "brightness_offset": 0.3, "noise_sigma": 0.12,
    "lesion_intensity": 0.2, "lesion_radius_min": 2.5, "lesion_radius_max": 4.5,
    "background_texture_seed": 202, "n_per_class": 200, "seed": 2002,
}


@dataclass
class SiteRecipe:
    site_id: int
    spec: SiteSpec
    n_per_class: int
    seed: int


def parse_kv_file(path):
    """Read ``key = value`` lines into an ordered dict; duplicates rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
            key, _, value = text.partition("=")
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def _convert(key, raw, parser):
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r}: {exc}") from None


def _site_recipe(site_id, values, label):
    unknown = sorted(set(values) - set(SITE_KEYS))
    if unknown:
        raise ConfigError(f"unknown key {label}{unknown[0]!r}")
    typed = {k: _convert(f"{label}{k}", v, SITE_KEYS[k]) for k, v in values.items()}
    for req in ("n_per_class", "seed"):
        if req not in typed:
            raise ConfigError(f"missing required key {label}{req}")
    n = typed.pop("n_per_class")
    seed = typed.pop("seed")
    if n < 1:
        raise ConfigError(f"{label}n_per_class must be >= 1, got {n}")
    typed.setdefault("background_texture_seed", seed)
    try:
        spec = SiteSpec(**typed)
    except ValueError as exc:
        raise ConfigError(f"site {label.rstrip('.')}: {exc}") from None
    return SiteRecipe(site_id=site_id, spec=spec, n_per_class=n, seed=seed)


def parse_gen_spec(path):
    """Parse a generation spec into SiteRecipes (one site, or site_a/site_b)."""
    kv = parse_kv_file(path)
    grouped = any(k.startswith(("site_a.", "site_b.")) for k in kv)
    if grouped:
        groups = {"site_a": {}, "site_b": {}}
        for k, v in kv.items():
            prefix, _, rest = k.partition(".")
            if prefix not in groups or not rest:
                raise ConfigError(f"unknown key {k!r}")
            groups[prefix][rest] = v
        recipes = []
        for site_id, name in ((0, "site_a"), (1, "site_b")):
            if not groups[name]:
                raise ConfigError(f"grouped spec is missing the {name}.* keys")
            recipes.append(_site_recipe(site_id, groups[name], f"{name}."))
        return recipes
    return [_site_recipe(0, kv, "")]


def default_recipes():
    return [
        _site_recipe(0, {k: str(v) for k, v in DEFAULT_SITE_A.items()}, "site_a."),
        _site_recipe(1, {k: str(v) for k, v in DEFAULT_SITE_B.items()}, "site_b."),
    ]


@dataclass
class ExperimentConfig:
    out: Path
    data_dir: Path = None
    recipes: list = field(default_factory=default_recipes)
    model_kwargs: dict = field(default_factory=dict)
    train_kwargs: dict = field(default_factory=dict)
    norm_explicit: bool = False

    def make_train_config(self, mode=None, seed=None):
        """Build a validated TrainConfig, deriving norm_mode when not pinned.

        ``mode`` overrides the file's train.mode; ``seed`` collapses the seed
        list to one run. A mode given without an explicit norm_mode picks the
        matching normalization; an explicit norm_mode is honored and may
        conflict (rejected by TrainConfig validation).
        """
        tk = dict(self.train_kwargs)
        if mode is not None:
            tk["mode"] = normalize_mode(mode)
        mk = dict(self.model_kwargs)
        if not self.norm_explicit:
            chosen = tk.get("mode")
            if chosen is None:
                chosen = tk["mode"] = "sepnorm"
            mk["norm_mode"] = (
                "per_site_dsbn" if chosen in ("sepnorm", "contrastive") else "shared_bn"
            )
        elif "mode" not in tk:
            tk["mode"] = (
                "sepnorm" if mk.get("norm_mode") == "per_site_dsbn" else "joint"
            )
        if seed is not None:
            tk["seeds"] = (int(seed),)
        try:
            return TrainConfig(model=ModelConfig(**mk), **tk)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def normalize_mode(mode):
    m = mode.replace("-", "_").strip().lower()
    if m not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return m


def parse_experiment_config(path):
    """Parse an experiment config file (out, data.dir, sites, model, train)."""
    kv = parse_kv_file(path)
    if "out" not in kv:
        raise ConfigError("missing required key 'out'")
    out = Path(kv.pop("out"))
    data_dir = Path(kv.pop("data.dir")) if "data.dir" in kv else None
    groups = {"site_a": {}, "site_b": {}, "model": {}, "train": {}}
    for k, v in kv.items():
        prefix, _, rest = k.partition(".")
        if prefix not in groups or not rest:
            raise ConfigError(f"unknown key {k!r}")
        groups[prefix][rest] = v

    unknown = sorted(set(groups["model"]) - set(MODEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown key 'model.{unknown[0]}'")
    model_kwargs = {
        k: _convert(f"model.{k}", v, MODEL_KEYS[k]) for k, v in groups["model"].items()
    }
    if "norm_mode" in model_kwargs and model_kwargs["norm_mode"] not in NORM_MODES:
        raise ConfigError(
            f"model.norm_mode must be one of {NORM_MODES}, got {model_kwargs['norm_mode']!r}"
        )

    unknown = sorted(set(groups["train"]) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown key 'train.{unknown[0]}'")
    train_kwargs = {
        k: _convert(f"train.{k}", v, TRAIN_KEYS[k]) for k, v in groups["train"].items()
    }
    if "mode" in train_kwargs:
        train_kwargs["mode"] = normalize_mode(train_kwargs["mode"])

    if groups["site_a"] or groups["site_b"]:
        recipes = []
        for site_id, name in ((0, "site_a"), (1, "site_b")):
            if not groups[name]:
                raise ConfigError(f"missing the {name}.* keys (both sites or neither)")
            recipes.append(_site_recipe(site_id, groups[name], f"{name}."))
    else:
        recipes = default_recipes()

    return ExperimentConfig(
        out=out, data_dir=data_dir, recipes=recipes,
        model_kwargs=model_kwargs, train_kwargs=train_kwargs,
        norm_explicit="norm_mode" in model_kwargs,
    )
