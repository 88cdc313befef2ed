"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Every key is checked against a fixed schema before any work starts and
unknown sections or keys are errors.  Command-line flags override file
values through :meth:`RunConfig.override`.
"""
import configparser
from dataclasses import dataclass, field, replace

from scan2num.model import NetworkConfig, scaled_config
from scan2num.phantom import PhantomSpec
from scan2num.train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(raw):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _ints(raw):
    return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)


def _floats(raw):
    return tuple(float(x) for x in raw.replace(" ", "").split(",") if x)


SCHEMA = {
    "data": {"manifest": str, "target": str, "split": str},
    "network": {
        "input_size": int, "num_slices": int, "width_factor": float,
        "conv_channels": _ints, "kernels": _ints, "strides": _ints, "pool_after": _ints,
    },
    "train": {
        "batch_size": int, "base_lr": float, "max_iter": int, "momentum": float,
        "weight_decay": float, "dropout": float, "val_every": int, "seed": int,
        "augment": _bool, "mirror_prob": float, "max_rotation_deg": float,
        "deterministic": _bool, "threads": int, "standardize_target": _bool,
    },
    "eval": {"resamples": int, "seed": int},
    "phantom": {
        "count": int, "seed": int, "dims": _ints, "semi_axes": _floats, "spacing_mm": _floats,
        "parenchyma_hu_mean": float, "parenchyma_hu_noise_sd": float, "lesion_hu": float,
        "lesion_radius_range": _floats, "severity_min": float, "severity_max": float,
    },
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {s: {} for s in SCHEMA})

    def get(self, section, key, default=None):
        return self.sections[section].get(key, default)

    def override(self, section, key, value):
        """Set a value from the command line; ``None`` leaves the file value."""
        if value is None:
            return
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        self.sections[section][key] = value

    # -------------------------------------------------------- builders
    def network(self):
        s = self.sections["network"]
        try:
            if "input_size" in s or "width_factor" in s:
                base = scaled_config(s.get("input_size", 512), s.get("num_slices", 16),
                                     s.get("width_factor", 1.0))
            else:
                base = replace(NetworkConfig(), num_slices=s.get("num_slices", 16))
        except ValueError as exc:
            raise ConfigError(f"[network] {exc}") from None
        kw = {}
        for key in ("conv_channels", "kernels", "strides"):
            if key in s:
                kw[key] = s[key]
        if "pool_after" in s:
            kw["pool_after"] = frozenset(s["pool_after"])
        if "conv_channels" in kw:
            kw["feature_dim"] = kw["conv_channels"][-1]
        try:
            return replace(base, **kw) if kw else base
        except ValueError as exc:
            raise ConfigError(f"[network] {exc}") from None

    def train(self, target=None):
        kw = dict(self.sections["train"])
        target = target or self.get("data", "target", "ve")
        try:
            net = self.network()
            merged = replace(net, dropout_rate=kw.get("dropout", 0.5))
            return TrainConfig(target=target, network=merged, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def phantom_template(self):
        kw = {k: v for k, v in self.sections["phantom"].items()
              if k not in ("count", "seed", "severity_min", "severity_max")}
        try:
            return PhantomSpec(**kw)
        except ValueError as exc:
            raise ConfigError(f"[phantom] {exc}") from None

    def severity_range(self):
        s = self.sections["phantom"]
        return (s.get("severity_min", 0.0), s.get("severity_max", 1.0))


def parse_config(text, source="<config>"):
    """Parse and validate config text into a :class:`RunConfig`."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            try:
                cfg.sections[section][key] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for [{section}] {key}: {exc}") from None
    return cfg


def load_config(path):
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=path)
