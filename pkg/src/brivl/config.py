"""Run configuration: typed defaults, key=value files, --set overrides.

The config file format is plain text, one ``key = value`` per line, with
``#`` comments; unknown keys are rejected.  Keys that shrink a published
full-scale recipe down to desk scale carry the full-scale reference
value in the generated defaults documentation.
"""

from dataclasses import dataclass, fields

from . import vocab


class ConfigError(Exception):
    """Malformed config file, unknown key, or bad value."""


@dataclass
class RunConfig:
    # encoder
    embed_dim: int = 64
    image_size: int = 32
    mspp_scales: tuple = (1, 6)
    sa_layers: int = 2
    sa_heads: int = 4
    mlp_hidden: int = 128
    max_text_len: int = 16
    use_sa: bool = True
    # trainer
    tau: float = 0.07
    momentum: float = 0.99
    batch_size: int = 32
    queue_size: int = 512
    loss_mode: str = "queue"
    epochs: int = 15
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    lr_warmup_steps: int = 100
    grad_clip: float = 1.0
    weight_decay: float = 1e-5
    seed: int = 7
    augment: bool = True
    # visualization / generation
    vis_iterations: int = 500
    vis_lr: float = 0.05
    vis_alpha: float = 1.0
    gen_iterations: int = 300
    gen_lr: float = 2.0
    # toy generator
    code_grid: int = 4
    code_dim: int = 16
    codebook_size: int = 64
    gen_train_steps: int = 1500
    gen_train_lr: float = 1e-3
    # paths (usually supplied on the command line)
    data: str = ""
    out: str = ""

    @property
    def vocab_size(self) -> int:
        return vocab.VOCAB_SIZE


# full-scale reference values for keys that are scaled down at desk size
FULL_SCALE = {
    "embed_dim": "2560",
    "image_size": "600",
    "mspp_scales": "1,6",
    "sa_layers": "4",
    "tau": "0.07",
    "momentum": "0.99",
    "batch_size": "2688",
    "queue_size": "13440",
    "lr": "0.0001",
    "weight_decay": "1e-05",
    "code_grid": "16",
    "code_dim": "256",
    "codebook_size": "1024",
}

HELP = {
    "embed_dim": "joint embedding width",
    "image_size": "input image side in pixels",
    "mspp_scales": "comma-separated patch-grid scales",
    "sa_layers": "transformer layers per self-attention block",
    "sa_heads": "attention heads",
    "mlp_hidden": "hidden width of the MLP heads",
    "max_text_len": "token positions per text",
    "use_sa": "false reproduces the no-self-attention ablation",
    "tau": "softmax temperature",
    "momentum": "momentum-encoder EMA coefficient",
    "batch_size": "pairs per step",
    "queue_size": "negative queue capacity (multiple of batch_size)",
    "loss_mode": "queue | in_batch",
    "epochs": "training epochs",
    "lr": "Adam learning rate",
    "weight_decay": "L2 penalty folded into gradients",
    "seed": "master seed for init/shuffle/augmentation",
    "augment": "random graying and color jitter",
    "vis_iterations": "pixel-inversion steps",
    "vis_lr": "pixel-inversion learning rate",
    "vis_alpha": "weight of the optional neuron term",
    "gen_iterations": "codebook-inversion steps",
    "gen_lr": "codebook-inversion learning rate",
    "code_grid": "code grid side",
    "code_dim": "codebook entry width",
    "codebook_size": "number of codebook entries",
    "gen_train_steps": "toy generator training steps",
    "gen_train_lr": "toy generator learning rate",
    "data": "default dataset path",
    "out": "default output directory",
}


def _parse_value(key: str, text: str, target_type):
    text = text.strip()
    try:
        if target_type is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is tuple:
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def _field_types():
    return {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}


def apply_assignments(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``key=value`` strings onto a copy of ``cfg``."""
    types = _field_types()
    values = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    for raw in assignments:
        if "=" not in raw:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, _, text = raw.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, text, types[key])
    return RunConfig(**values)


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        assignments = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                assignments.append(line)
        cfg = apply_assignments(cfg, assignments)
    return apply_assignments(cfg, overrides)


def to_text(cfg: RunConfig) -> str:
    """Canonical serialization (used in checkpoints for exact comparison)."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def defaults_text() -> str:
    cfg = RunConfig()
    lines = ["# defaults (desk scale); edit or override with --set key=value"]
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        entry = f"{f.name} = {value}"
        notes = []
        if f.name in HELP:
            notes.append(HELP[f.name])
        if f.name in FULL_SCALE:
            notes.append(f"full-scale reference: {FULL_SCALE[f.name]}")
        if notes:
            entry = f"{entry:<28}# " + "; ".join(notes)
        lines.append(entry)
    return "\n".join(lines) + "\n"
