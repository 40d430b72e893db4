"""Model/adapter settings (hidden size and adapter rank list)."""

from dataclasses import dataclass
from typing import Dict, Tuple


@dataclass(frozen=True)
class ModelSetting:
    name: str
    base_model: str
    hidden_size: int
    ranks: Tuple[int, ...]


SETTINGS: Dict[str, ModelSetting] = {
    s.name: s
    for s in (
        ModelSetting("S1", "Llama-7B", 4096, (8,)),
        ModelSetting("S2", "Llama-7B", 4096, (64, 32, 16, 8)),
        ModelSetting("S4", "Llama-13B", 5120, (64, 32, 16)),
        ModelSetting("S5", "Llama-30B", 7168, (32,)),
        ModelSetting("S6", "Llama-70B", 8192, (64,)),
    )
}


def get_setting(name: str) -> ModelSetting:
    try:
        return SETTINGS[name]
    except KeyError:
        raise ValueError(f"unknown setting {name!r}; known: {', '.join(SETTINGS)}") from None
