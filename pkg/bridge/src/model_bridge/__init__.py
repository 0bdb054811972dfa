"""Serve a pretrained image classifier over the JSON-lines scoring protocol.

The bridge wraps one torch network per process behind the wire protocol the
patchlab toolkit speaks (`--oracle cmd:"model-bridge <model>"` or `tcp:`),
answering every request with plain scores and contrast scores from the same
network with its final classification layer's weights negated.
"""

from .config import (IMAGENET_MEAN, IMAGENET_STD, KIND_LOGIT, KIND_PROBABILITY,
                     KINDS, BridgeConfig, BridgeError)
from .hosting import HostedClassifier, find_classification_head, load_classifier
from .server import (PROTOCOL_VERSION, decode_request, hello_message, serve,
                     serve_channel)

__version__ = "0.1.0"

__all__ = [
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "KIND_LOGIT",
    "KIND_PROBABILITY",
    "KINDS",
    "PROTOCOL_VERSION",
    "BridgeConfig",
    "BridgeError",
    "HostedClassifier",
    "decode_request",
    "find_classification_head",
    "hello_message",
    "load_classifier",
    "serve",
    "serve_channel",
    "__version__",
]
