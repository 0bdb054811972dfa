"""Load a classifier once and score batches with it, plain and contrast.

Contrast scores come from the same network with the final classification
layer's weight matrix multiplied by -1 (bias included unless configured
otherwise).  The flip happens in place around the contrast forward pass and
is always undone afterwards; a sign flip is exact in IEEE arithmetic, so the
restored parameters are bit-identical to the originals.
"""

from __future__ import annotations

import numpy as np
import torch

from .config import KIND_PROBABILITY, BridgeConfig, BridgeError


def load_classifier(identifier: str, device: str) -> torch.nn.Module:
    """Build the network named by ``file:<path>`` or ``torchvision:<name>``."""
    if identifier.startswith("file:"):
        path = identifier[len("file:"):]
        try:
            model = torch.jit.load(path, map_location=device)
        except Exception as err:
            raise BridgeError(f"cannot load TorchScript archive {path}: {err}") from err
    elif identifier.startswith("torchvision:"):
        name = identifier[len("torchvision:"):]
        try:
            from torchvision import models as zoo
        except ImportError as err:
            raise BridgeError("torchvision is not installed") from err
        builder = getattr(zoo, name, None)
        if builder is None or not callable(builder):
            raise BridgeError(f"torchvision has no model builder named {name!r}")
        try:
            model = builder(weights="DEFAULT")
        except Exception as err:
            raise BridgeError(f"cannot build torchvision model {name!r}: {err}") from err
    else:
        raise BridgeError(
            f"model identifier must start with file: or torchvision:, got {identifier!r}")
    model.eval()
    return model.to(device)


def _module_kind(module) -> str:
    # Loaded TorchScript modules report their source class via original_name;
    # eager modules via their type.
    name = getattr(module, "original_name", "")
    return name if isinstance(name, str) and name else type(module).__name__


def find_classification_head(model) -> tuple[str, object]:
    """Return (path, module) of the last Linear layer in registration order.

    Standard classifiers register their scoring layer last, so the final
    Linear is the classification head for every torchvision architecture.
    """
    found = None
    for name, module in model.named_modules():
        if _module_kind(module) == "Linear":
            found = (name, module)
    if found is None:
        raise BridgeError("model has no Linear layer to use as a classification head")
    return found


class HostedClassifier:
    """One network instance answering both halves of a contrastive request."""

    def __init__(self, config: BridgeConfig):
        self.config = config
        self.model = load_classifier(config.model, config.device)
        self.head_path, self._head = find_classification_head(self.model)
        weight = getattr(self._head, "weight", None)
        if weight is None or weight.ndim != 2:
            raise BridgeError(f"head {self.head_path!r} has no 2-D weight matrix")
        self.k = int(weight.shape[0])
        shape = (1, config.channels, 1, 1)
        self._mean = torch.tensor(config.mean, dtype=torch.float32,
                                  device=config.device).view(shape)
        self._std = torch.tensor(config.std, dtype=torch.float32,
                                 device=config.device).view(shape)

    def _flip_head(self) -> None:
        with torch.no_grad():
            self._head.weight.mul_(-1.0)
            bias = getattr(self._head, "bias", None)
            if bias is not None and self.config.negate_bias:
                bias.mul_(-1.0)

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.inference_mode():
            out = self.model(x)
        if not isinstance(out, torch.Tensor):
            raise ValueError(f"model output is {type(out).__name__}, not a tensor")
        if out.ndim != 2 or out.shape[1] != self.k:
            raise ValueError(
                f"model returned shape {tuple(out.shape)}, expected (n, {self.k})")
        return out

    def score(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Score one (n, h, w, c) float32 batch: (scores, contrast_scores)."""
        if batch.ndim != 4:
            raise ValueError(f"batch must be 4-D (n, h, w, c), got shape {batch.shape}")
        if batch.shape[3] != self.config.channels:
            raise ValueError(
                f"images have {batch.shape[3]} channels but the bridge normalizes "
                f"{self.config.channels}")
        x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
        x = x.permute(0, 3, 1, 2).to(self.config.device)
        x = (x - self._mean) / self._std
        scores = self._forward(x)
        self._flip_head()
        try:
            contrast = self._forward(x)
        finally:
            self._flip_head()
        if self.config.kind == KIND_PROBABILITY:
            scores = torch.softmax(scores, dim=1)
            contrast = torch.softmax(contrast, dim=1)
        return (scores.cpu().numpy().astype(np.float64),
                contrast.cpu().numpy().astype(np.float64))
