"""Hierarchical run configuration: text files with [section] headers.

Every field has a default; unknown sections or keys are rejected loudly.
Command-line overrides use dotted paths (``data.scenes=100``). The full
resolved configuration echoes verbatim into checkpoints and reports.
"""

from dataclasses import asdict

from .hlq import HlqConfig
from .microworld import WorldConfig
from .model import ModelConfig
from .training import TrainConfig

SAMPLER_DEFAULTS = {"temperature": 1.0, "top_k": 50}
EVAL_DEFAULTS = {"depth_probe_ty": 0.25, "n_seeds": 5, "max_scenes": 50,
                 "seed": 900, "edit_move_px_min": 3, "edit_move_px_max": 5,
                 "composite_steps": 2, "composite_n_seeds": 3}

HLQ_RGB_DEFAULTS = dict(asdict(HlqConfig(modality="rgb", lr=3e-4, seed=101)))
HLQ_FLOW_DEFAULTS = dict(asdict(HlqConfig(modality="flow", lr=3e-4, seed=102,
                                          constant_frac=0.6, steps=3000)))


def _defaults():
    return {
        "data": dict(asdict(WorldConfig())),
        "hlq_rgb": dict(HLQ_RGB_DEFAULTS),
        "hlq_flow": dict(HLQ_FLOW_DEFAULTS),
        "model": dict(asdict(ModelConfig())),
        "curriculum": dict(asdict(TrainConfig())),
        "sampler": dict(SAMPLER_DEFAULTS),
        "eval": dict(EVAL_DEFAULTS),
    }


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        parts = [p.strip() for p in raw.split(",") if p.strip() != ""]
        elem = default[0] if default else 1.0
        return tuple(int(p) if isinstance(elem, int) else float(p) for p in parts)
    return raw


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


class RunConfig:
    """Resolved configuration over all sections."""

    def __init__(self, sections=None):
        self.sections = _defaults()
        if sections:
            for s, kv in sections.items():
                for k, v in kv.items():
                    self._set(s, k, v)

    def _set(self, section, key, raw):
        if section not in self.sections:
            raise KeyError(f"unknown config section [{section}]")
        if key not in self.sections[section]:
            raise KeyError(f"unknown config key {section}.{key}")
        default = _defaults()[section][key]
        self.sections[section][key] = (raw if not isinstance(raw, str)
                                       else _parse_value(raw, default))

    @staticmethod
    def load(path=None, overrides=()):
        cfg = RunConfig()
        if path:
            section = None
            with open(path) as f:
                for ln, line in enumerate(f, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if line.startswith("[") and line.endswith("]"):
                        section = line[1:-1].strip()
                        if section not in cfg.sections:
                            raise KeyError(f"{path}:{ln}: unknown config section [{section}]")
                        continue
                    if "=" not in line:
                        raise ValueError(f"{path}:{ln}: expected 'key = value'")
                    if section is None:
                        raise ValueError(f"{path}:{ln}: key outside any [section]")
                    k, _, v = line.partition("=")
                    cfg._set(section, k.strip(), v.strip())
        for ov in overrides:
            if "=" not in ov:
                raise ValueError(f"override {ov!r} must look like section.key=value")
            dotted, _, val = ov.partition("=")
            if "." not in dotted:
                raise KeyError(f"override key {dotted!r} must be section.key")
            s, _, k = dotted.partition(".")
            cfg._set(s.strip(), k.strip(), val.strip())
        return cfg

    def derive_seeds(self, master_seed):
        """Spread a single seed across every randomness consumer."""
        self.sections["data"]["seed"] = master_seed
        self.sections["hlq_rgb"]["seed"] = master_seed + 1
        self.sections["hlq_flow"]["seed"] = master_seed + 2
        self.sections["curriculum"]["seed"] = master_seed + 3
        self.sections["model"]["init_seed"] = master_seed + 4
        self.sections["eval"]["seed"] = master_seed + 5

    def world_config(self):
        return WorldConfig(**self.sections["data"])

    def hlq_config(self, modality):
        section = "hlq_rgb" if modality == "rgb" else "hlq_flow"
        return HlqConfig(**self.sections[section])

    def model_config(self):
        return ModelConfig(**self.sections["model"])

    def train_config(self):
        return TrainConfig(**self.sections["curriculum"])

    def echo_text(self):
        lines = []
        for s in sorted(self.sections):
            lines.append(f"[{s}]")
            for k in sorted(self.sections[s]):
                lines.append(f"{k} = {_format_value(self.sections[s][k])}")
        return "\n".join(lines)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.echo_text() + "\n")
