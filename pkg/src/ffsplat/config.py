"""Plain-text key=value configuration shared by every CLI command.

Format: one `key = value` per line, `#` starts a comment, blank lines are
skipped. Keys are dotted by module (`model.dim`, `train.warmup`,
`loss.lambda_depth`, `scene.path`, `eval.stride`). Values are coerced to
bool/int/float/None when they look like one; comma-separated values become
lists. Training stages are compact strings: `res:steps:peak_lr` with
optional `:prune`, `:whole`, and `:range=lo-hi` suffixes, e.g.

    train.stages = 64:2000:4e-3:range=16-32, 128:500:1e-3:prune:whole

Unknown keys under a known prefix are rejected so typos fail loudly.
"""

from __future__ import annotations

from . import backbone as bb
from .evaluation import EvalProtocol
from .losses import LossWeights
from .synth import SyntheticSceneSpec
from .training import StageConfig, TrainConfig


def parse_value(text):
    """Coerce a raw string: bool, none, int, float, list, or string."""
    s = text.strip()
    if "," in s:
        return [parse_value(p) for p in s.split(",") if p.strip()]
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def parse_config_text(text, source="<config>"):
    """key=value lines -> dict; raises ValueError with line numbers."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', "
                             f"got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def load_config(path):
    with open(path, "r") as f:
        return parse_config_text(f.read(), source=str(path))


def apply_overrides(cfg, pairs):
    """CLI `key=value` strings win over file values. Returns cfg (mutated)."""
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, _, value = pair.partition("=")
        cfg[key.strip()] = parse_value(value)
    return cfg


def _section(cfg, prefix, allowed):
    """Extract `prefix.*` keys, validating against the allowed field set."""
    out = {}
    for key, value in cfg.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in allowed:
            raise ValueError(f"unknown config key {key!r} "
                             f"(known: {', '.join(sorted(allowed))})")
        out[name] = value
    return out


_MODEL_FIELDS = {"layout", "dim", "dim_merged", "merge_at", "patch",
                 "state_dim", "head_dim", "expand", "conv_width",
                 "mlp_ratio", "near", "far", "scan_chunk", "attn_rows"}


def model_config(cfg):
    kw = _section(cfg, "model", _MODEL_FIELDS)
    return bb.ModelConfig(**kw)


def parse_stage(text):
    """'res:steps:peak_lr[:prune][:whole][:range=lo-hi]' -> StageConfig."""
    parts = [p.strip() for p in str(text).split(":")]
    if len(parts) < 3:
        raise ValueError(f"stage {text!r} needs res:steps:peak_lr")
    kw = dict(resolution=int(parts[0]), steps=int(parts[1]),
              peak_lr=float(parts[2]))
    for flag in parts[3:]:
        if flag == "prune":
            kw["prune"] = True
        elif flag == "whole":
            kw["whole_sequence"] = True
        elif flag.startswith("range="):
            lo, _, hi = flag[len("range="):].partition("-")
            kw["view_range"] = (int(lo), int(hi))
        else:
            raise ValueError(f"stage {text!r}: unknown flag {flag!r}")
    return StageConfig(**kw)


_TRAIN_FIELDS = {"stages", "n_inputs", "n_targets", "warmup", "seed",
                 "grad_clip", "order_augment", "log_every"}
_LOSS_FIELDS = {"lambda_perceptual", "lambda_opacity", "lambda_depth",
                "smooth_l1_beta"}


def train_config(cfg):
    kw = _section(cfg, "train", _TRAIN_FIELDS)
    if "stages" in kw:
        stages = kw["stages"]
        if not isinstance(stages, list):
            stages = [stages]
        kw["stages"] = [parse_stage(s) for s in stages]
    loss_kw = _section(cfg, "loss", _LOSS_FIELDS)
    if loss_kw:
        kw["weights"] = LossWeights(**loss_kw)
    return TrainConfig(**kw)


_SCENE_FIELDS = {"seed", "n_objects", "extent", "texture_freq", "path",
                 "n_frames", "width", "height"}


def scene_spec(cfg):
    kw = _section(cfg, "scene", _SCENE_FIELDS)
    return SyntheticSceneSpec(**kw)


_EVAL_FIELDS = {"stride", "n_inputs", "keep_frac", "resolution",
                "max_frames", "seed"}


def eval_protocol(cfg):
    kw = _section(cfg, "eval", _EVAL_FIELDS)
    return EvalProtocol(**kw)
