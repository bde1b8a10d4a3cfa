"""Key = value configuration files and typed access to their entries.

Files are UTF-8 text, one `key = value` per line, `#` starts a comment.
Unknown keys are rejected so typos fail loudly instead of silently training
with defaults.  Command-line flags take precedence over file entries, which
take precedence over built-in defaults.
"""


class ConfigError(ValueError):
    """Invalid configuration value, key, or combination."""


KNOWN_KEYS = frozenset({
    "model",
    "model.classes",
    "model.sa.ratio",
    "model.sa.activation",
    "model.sa.pool",
    "backbone.variant",
    "dataset",
    "out",
    "seed",
    "epochs",
    "batch_size",
    "base_lr",
    "lr_power",
    "momentum",
    "weight_decay",
    "alpha",
    "beta",
    "eval_every",
    "data.classes",
    "data.size",
    "data.count",
    "data.shapes_min",
    "data.shapes_max",
    "data.noise_std",
})


def parse_config_text(text, source="<config>"):
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def parse_config_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), source=str(path))


def get_typed(entries, key, kind, default):
    """Fetch entries[key] converted by `kind`, or the default when absent."""
    if key not in entries:
        return default
    value = entries[key]
    try:
        if kind is bool:
            if value not in ("0", "1", "true", "false"):
                raise ValueError(value)
            return value in ("1", "true")
        return kind(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}")
