"""Line-based `key = value` configuration with `[section]` headers.

One flat dataclass carries every knob: architecture flags and dims,
tokenizer shape, noise schedule, auxiliary heads, multimer defaults, and
training hyperparameters. Round-trips through text losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import InvalidConfig
from .geo_arch import BlockConfig


@dataclass
class ModelConfig:
    # [model]
    d_model: int = 64
    d_pair: int = 16
    d_tri_update: int = 16
    d_tri_attn_head: int = 8
    heads: int = 4
    heads_tri: int = 2
    heads_seqstruct: int = 4
    transition_ratio: int = 4
    n_blocks: int = 2
    head: str = "bit"
    pair_bias: bool = False
    struct_transition: bool = False
    triangle_update: bool = False
    triangle_attention: bool = False
    seqstruct_attention: bool = False
    # [tokenizer]
    k: int = 8
    tok_width: int = 64
    tok_blocks: int = 3
    tok_heads: int = 4
    # [schedule]
    T: int = 100
    weighting: str = "uniform"
    # [repa]
    repa_enabled: bool = False
    repa_weight: float = 0.5
    # [resdiff]
    resdiff_enabled: bool = False
    resdiff_t_r: int = 100
    resdiff_hidden: int = 128
    resdiff_layers: int = 4
    # [fm]
    fm_enabled: bool = False
    fm_n_steps: int = 10
    # [multimer]
    linker_len: int = 25
    pos_offset: int = 25
    # [training]
    lr_peak: float = 1e-4
    warmup: int = 2000
    lr_floor: float = 1e-5
    steps: int = 1000
    batch: int = 1
    seed: int = 0
    folding_sft: bool = False

    def block_config(self):
        return BlockConfig(
            pair_bias=self.pair_bias,
            struct_transition=self.struct_transition,
            triangle_update=self.triangle_update,
            triangle_attention=self.triangle_attention,
            seqstruct_attention=self.seqstruct_attention,
            d_model=self.d_model,
            d_pair=self.d_pair,
            d_tri_update=self.d_tri_update,
            d_tri_attn_head=self.d_tri_attn_head,
            heads_tri=self.heads_tri,
            heads=self.heads,
            transition_ratio=self.transition_ratio,
            heads_seqstruct=self.heads_seqstruct,
        )

    def validate(self):
        if self.head not in ("bit", "index"):
            raise InvalidConfig(f"head must be 'bit' or 'index', got {self.head!r}")
        self.block_config().validate()
        return self


_SECTIONS = {
    "model": [
        "d_model", "d_pair", "d_tri_update", "d_tri_attn_head", "heads", "heads_tri",
        "heads_seqstruct", "transition_ratio", "n_blocks", "head", "pair_bias",
        "struct_transition", "triangle_update", "triangle_attention", "seqstruct_attention",
    ],
    "tokenizer": ["k", "tok_width", "tok_blocks", "tok_heads"],
    "schedule": ["T", "weighting"],
    "repa": ["repa_enabled", "repa_weight"],
    "resdiff": ["resdiff_enabled", "resdiff_t_r", "resdiff_hidden", "resdiff_layers"],
    "fm": ["fm_enabled", "fm_n_steps"],
    "multimer": ["linker_len", "pos_offset"],
    "training": ["lr_peak", "warmup", "lr_floor", "steps", "batch", "seed", "folding_sft"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _parse_value(name, raw):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise InvalidConfig(f"{name}: expected boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise InvalidConfig(f"{name}: expected integer, got {raw!r}")
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise InvalidConfig(f"{name}: expected number, got {raw!r}")
    return raw


def format_config(cfg: ModelConfig) -> str:
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {getattr(cfg, name)}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text) -> ModelConfig:
    cfg = ModelConfig()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {line_no}: expected 'key = value', got {line!r}")
        name, raw = (part.strip() for part in line.split("=", 1))
        if name not in _FIELD_TYPES:
            raise InvalidConfig(f"line {line_no}: unknown key {name!r}")
        setattr(cfg, name, _parse_value(name, raw))
    return cfg.validate()


def apply_overrides(cfg: ModelConfig, overrides) -> ModelConfig:
    """Apply `key=value` strings (CLI --set)."""
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(f"override must be key=value, got {item!r}")
        name, raw = (part.strip() for part in item.split("=", 1))
        if name not in _FIELD_TYPES:
            raise InvalidConfig(f"unknown config key {name!r}")
        setattr(cfg, name, _parse_value(name, raw))
    return cfg.validate()


def check_architecture(stored_text, cfg: ModelConfig):
    """Raise InvalidConfig if the stored config echo disagrees with `cfg`
    on any non-training field (training hyperparameters may differ)."""
    stored = parse_config(stored_text)
    for section, names in _SECTIONS.items():
        if section == "training":
            continue
        for name in names:
            if getattr(stored, name) != getattr(cfg, name):
                raise InvalidConfig(
                    f"checkpoint config mismatch: {name} = {getattr(stored, name)!r} "
                    f"vs loaded {getattr(cfg, name)!r}"
                )


def load_config(path=None, overrides=()) -> ModelConfig:
    if path is None:
        cfg = ModelConfig()
    else:
        with open(path) as fh:
            cfg = parse_config(fh.read())
    return apply_overrides(cfg, overrides)
