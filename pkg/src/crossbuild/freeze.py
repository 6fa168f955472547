"""Layer-freezing plans over the model's named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError

PARAM_GROUPS = (
    "static_embed",
    "known_embed",
    "unknown_embed",
    "varsel_grn",
    "encoder_lstm",
    "decoder_lstm",
    "attention",
    "post_attn_grn",
    "output_head",
)

EMBEDDING_GROUPS = frozenset({"static_embed", "known_embed", "unknown_embed"})

STRATEGY_ALIASES = {
    "FF": "FullFinetune",
    "PF": "PartialFinetune",
    "PO": "ProbeOnly",
    "PU": "ProgressiveUnfreeze",
}


@dataclass(frozen=True)
class FreezePlan:
    strategy: str
    trainable_groups: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "trainable_groups", frozenset(self.trainable_groups))

    @property
    def short_name(self) -> str:
        return {v: k for k, v in STRATEGY_ALIASES.items()}.get(self.strategy, self.strategy)

    def validate(self, groups) -> None:
        unknown = self.trainable_groups - set(groups)
        if unknown:
            raise ContractError(f"FreezePlan {self.strategy}: unknown groups {sorted(unknown)}")

    def frozen_groups(self, groups) -> frozenset[str]:
        self.validate(groups)
        return frozenset(groups) - self.trainable_groups


def make_plan(strategy: str, groups=PARAM_GROUPS) -> FreezePlan:
    """Build one of the four named plans; accepts the FF/PF/PO/PU aliases."""
    name = STRATEGY_ALIASES.get(strategy, strategy)
    groups = tuple(groups)
    if name == "FullFinetune":
        trainable = set(groups)
    elif name == "PartialFinetune":
        trainable = set(groups) - EMBEDDING_GROUPS
    elif name == "ProbeOnly":
        trainable = {"output_head"}
    elif name == "ProgressiveUnfreeze":
        # Decoder side stays trainable: the attention queries come from the
        # decoder, so the attention block is adapted with it.
        trainable = {"decoder_lstm", "attention", "post_attn_grn", "output_head"}
    else:
        raise ContractError(f"unknown freezing strategy {strategy!r}")
    plan = FreezePlan(name, frozenset(trainable))
    plan.validate(groups)
    return plan


STRATEGIES = ("FullFinetune", "PartialFinetune", "ProbeOnly", "ProgressiveUnfreeze")
