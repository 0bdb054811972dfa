"""Settings for one hosted classifier process."""

from __future__ import annotations

from dataclasses import dataclass

KIND_LOGIT = "logit"
KIND_PROBABILITY = "probability"
KINDS = (KIND_LOGIT, KIND_PROBABILITY)

# The de-facto standard constants most public classifier checkpoints expect.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BridgeError(RuntimeError):
    """The bridge cannot start or a hosting contract is violated."""


@dataclass(frozen=True)
class BridgeConfig:
    """What to serve and how to feed it.

    ``model`` selects the network: ``file:<path>`` loads a TorchScript
    archive, ``torchvision:<name>`` instantiates a torchvision classifier
    with its default pretrained weights.  Requests carry pixels in [0, 1];
    the bridge applies ``(x - mean) / std`` per channel before the forward
    pass so callers never handle model-specific normalization.
    """

    model: str
    device: str = "cpu"
    batch_size: int = 32
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    kind: str = KIND_LOGIT
    negate_bias: bool = True

    def __post_init__(self):
        if not self.model:
            raise BridgeError("model identifier must be non-empty")
        if self.batch_size < 1:
            raise BridgeError(f"batch size must be at least 1, got {self.batch_size}")
        if not self.mean or len(self.mean) != len(self.std):
            raise BridgeError(
                f"mean and std must list the same nonzero number of channels, "
                f"got {len(self.mean)} and {len(self.std)}")
        if any(value == 0.0 for value in self.std):
            raise BridgeError("std entries must be nonzero")
        if self.kind not in KINDS:
            raise BridgeError(f"score kind must be one of {KINDS}, got {self.kind!r}")

    @property
    def channels(self) -> int:
        return len(self.mean)
