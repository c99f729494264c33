"""Network containers and the architectures used by the experiments."""

from __future__ import annotations

import numpy as np

from .layers import (
    Conv2D,
    Dropout,
    Flatten,
    FullyConnected,
    Layer,
    MaxPool2D,
    Param,
    ReLU,
)
from .tensor import Rng


class Network:
    """A shared trunk feeding one or more heads.

    ``tap`` indexes the trunk layer whose output is the regularised hidden
    representation; it is exposed as ``self.hidden`` after every forward
    pass, and ``backward`` accepts an extra gradient to inject at that point.
    With a single head whose last layer ends the computation this is an
    ordinary feed-forward stack.
    """

    def __init__(self, trunk: list[Layer], heads: list[list[Layer]], tap: int,
                 head_names: list[str] | None = None, name: str = "net"):
        if not -len(trunk) <= tap < len(trunk):
            raise IndexError(f"tap index {tap} outside trunk of {len(trunk)} layers")
        self.trunk = trunk
        self.heads = heads
        self.tap = tap % len(trunk)
        self.head_names = head_names or [f"head{i}" for i in range(len(heads))]
        self.name = name
        self.hidden: np.ndarray | None = None
        if hasattr(trunk[0], "input_grad"):
            trunk[0].input_grad = False

    def params(self) -> list[Param]:
        out = []
        for layer in self.trunk:
            out.extend(layer.params())
        for head in self.heads:
            for layer in head:
                out.extend(layer.params())
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad.fill(0.0)

    def forward(self, x: np.ndarray, training: bool = False, rng: Rng | None = None) -> list[np.ndarray]:
        for i, layer in enumerate(self.trunk):
            x = layer.forward(x, training, rng)
            if i == self.tap:
                self.hidden = x
        outputs = []
        for head in self.heads:
            y = x
            for layer in head:
                y = layer.forward(y, training, rng)
            outputs.append(y)
        return outputs

    def backward(self, douts: list[np.ndarray], dhidden: np.ndarray | None = None) -> np.ndarray:
        dx = None
        for head, dout in zip(self.heads, douts):
            d = dout
            for layer in reversed(head):
                d = layer.backward(d)
            dx = d if dx is None else dx + d
        for i in range(len(self.trunk) - 1, -1, -1):
            if i == self.tap and dhidden is not None:
                dx = dx + dhidden
            dx = self.trunk[i].backward(dx)
        return dx

    def dropout_layers(self) -> list[Dropout]:
        layers = list(self.trunk) + [l for h in self.heads for l in h]
        return [l for l in layers if isinstance(l, Dropout)]


def lenet_dual_head(rng: Rng, input_shape=(28, 72, 1), dropout_p: float = 0.0,
                    hidden_units: int = 500, num_classes: int = 10, init: str = "uniform",
                    init_std: float = 0.01) -> Network:
    """Two conv+pool stages, a shared ReLU FC layer, and a softmax head per digit.

    Filter counts (20, 50) follow the classic LeNet reference. DeCov taps the
    post-ReLU hidden units; dropout, when enabled, follows them.
    """
    H, W, C = input_shape
    kw = dict(init=init, init_std=init_std)
    h = ((H - 4) // 2 - 4) // 2
    w = ((W - 4) // 2 - 4) // 2
    trunk: list[Layer] = [
        Conv2D(C, 20, 5, rng, name="conv1", **kw),
        MaxPool2D(2),
        Conv2D(20, 50, 5, rng, name="conv2", **kw),
        MaxPool2D(2),
        Flatten(),
        FullyConnected(h * w * 50, hidden_units, rng, name="fc1", **kw),
        ReLU(),
    ]
    tap = len(trunk) - 1
    if dropout_p > 0:
        trunk.append(Dropout(dropout_p))
    heads = [[FullyConnected(hidden_units, num_classes, rng, name=f"{side}.fc", **kw)]
             for side in ("left", "right")]
    return Network(trunk, heads, tap, head_names=["left", "right"], name="lenet-dual")


def lenet(rng: Rng, input_shape=(28, 28, 1), dropout_p: float = 0.0, hidden_units: int = 500,
          num_classes: int = 10, init: str = "uniform", init_std: float = 0.01) -> Network:
    """Single-head LeNet; same trunk as ``lenet_dual_head``."""
    net = lenet_dual_head(rng, input_shape, dropout_p, hidden_units, num_classes, init, init_std)
    net.heads = net.heads[:1]
    net.head_names = ["digit"]
    net.name = "lenet"
    return net


def autoencoder(rng: Rng, n_in: int = 784, hidden_units: int = 256, dropout_p: float = 0.0,
                init: str = "gaussian", init_std: float = 0.001) -> Network:
    """ReLU encoder and ReLU decoder with separate (untied) weights."""
    trunk: list[Layer] = [
        FullyConnected(n_in, hidden_units, rng, init=init, init_std=init_std, name="encoder"),
        ReLU(),
    ]
    tap = 1
    if dropout_p > 0:
        trunk.append(Dropout(dropout_p))
    head = [FullyConnected(hidden_units, n_in, rng, init=init, init_std=init_std, name="decoder"), ReLU()]
    return Network(trunk, [head], tap, head_names=["reconstruction"], name="autoencoder")


def cifar_quick(rng: Rng, input_shape=(32, 32, 3), dropout_p: float = 0.0, hidden_units: int = 64,
                num_classes: int = 10, init: str = "uniform", init_std: float = 0.01) -> Network:
    """Three 5x5 conv stages (32, 32, 64 filters) each with 3x3/2 max pooling,
    then a 64-unit FC layer with no nonlinearity and a softmax classifier.

    DeCov taps the FC output including its bias.
    """
    H, W, C = input_shape
    kw = dict(init=init, init_std=init_std)

    def pooled(s):
        return (s - 3) // 2 + 1

    trunk: list[Layer] = [
        Conv2D(C, 32, 5, rng, pad=2, name="conv1", **kw), MaxPool2D(3, 2), ReLU(),
        Conv2D(32, 32, 5, rng, pad=2, name="conv2", **kw), ReLU(), MaxPool2D(3, 2),
        Conv2D(32, 64, 5, rng, pad=2, name="conv3", **kw), ReLU(), MaxPool2D(3, 2),
        Flatten(),
    ]
    h, w = pooled(pooled(pooled(H))), pooled(pooled(pooled(W)))
    trunk.append(FullyConnected(h * w * 64, hidden_units, rng, name="fc1", **kw))
    tap = len(trunk) - 1
    if dropout_p > 0:
        trunk.append(Dropout(dropout_p))
    head = [FullyConnected(hidden_units, num_classes, rng, name="fc2", **kw)]
    return Network(trunk, [head], tap, head_names=["class"], name="cifar-quick")


def mlp(rng: Rng, n_in: int, hidden_units: int, num_classes: int, dropout_p: float = 0.0,
        init: str = "uniform", init_std: float = 0.01) -> Network:
    """One ReLU hidden layer and a softmax head; used for small sanity runs."""
    trunk: list[Layer] = [
        FullyConnected(n_in, hidden_units, rng, init=init, init_std=init_std, name="fc1"),
        ReLU(),
    ]
    tap = 1
    if dropout_p > 0:
        trunk.append(Dropout(dropout_p))
    head = [FullyConnected(hidden_units, num_classes, rng, init=init, init_std=init_std, name="fc2")]
    return Network(trunk, [head], tap, head_names=["class"], name="mlp")


ARCHITECTURES = {
    "lenet-dual": lenet_dual_head,
    "lenet": lenet,
    "autoencoder": autoencoder,
    "cifar-quick": cifar_quick,
    "mlp": mlp,
}
