"""Flat ``key=value`` configuration.

Keys are the RL training settings (``group_size``, ``max_num_turns``,
``kl_loss_coef`` ...) plus engine-only keys. Keys the engine does not use
are kept verbatim and echoed into exported records.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Union

# RL training configuration; trainer-side values are passed through only.
TRAINING_DEFAULTS: dict[str, object] = {
    "method": "Tool-augmented GRPO",
    "freeze_visual_encoder": True,
    "learning_rate": 1e-6,
    "kl_loss_coef": 1e-3,
    "warmup_ratio": 0,
    "group_size": 8,
    "batch_size": 64,
    "mini_batch_size": 32,
    "micro_batch_size_per_device": 1,
    "max_num_turns": 10,
    "max_prompt_length": 8192,
    "max_response_length": 20480,
}


def _coerce(raw: str):
    s = raw.strip()
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(v)
    return out


def load_config(path: Union[str, Path]) -> dict[str, object]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.items())


def load_prompt(name: str) -> str:
    return resources.files("weaver").joinpath("prompts", name).read_text(encoding="utf-8")


def system_prompt() -> str:
    from .toolkit import tool_docs

    return load_prompt("system_prompt.txt").format(tool_docs=tool_docs())


def construction_prompt(cot: str) -> str:
    from .toolkit import tool_docs

    return load_prompt("construct_prompt.txt").format(tool_docs=tool_docs(), cot=cot)
