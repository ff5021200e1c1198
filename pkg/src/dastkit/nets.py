"""Concrete architectures: tagged substitute classifiers and the multi-branch
label-controlled generator.

Classifiers come in three depths (small/medium/large = 3/4/5 conv layers).
The generator holds one upsampling branch per class plus a shared
post-processing net; a sample requested with label n flows through branch n
only, then the shared net, so branch gradients stay isolated per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .engine import ConfigurationError, Parameter, Tensor, ops

ARCH_DEPTHS = {"small": 3, "medium": 4, "large": 5}
CHANNEL_SCHEDULE = (32, 64, 128, 256, 256)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: a forward map plus its parameters and persistent buffers."""

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[Parameter]:
        return []

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(
            _uniform_init(rng, (in_features, out_features), in_features, dtype),
            name="dense.weight")
        self.bias = Parameter(
            _uniform_init(rng, (out_features,), in_features, dtype), name="dense.bias")

    def forward(self, x: Tensor) -> Tensor:
        return ops.add_bias(ops.matmul(x, self.weight), self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int, padding: int, rng: np.random.Generator, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = Parameter(
            _uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size),
                          fan_in, dtype),
            name="conv.kernel")
        self.bias = Parameter(_uniform_init(rng, (out_channels,), fan_in, dtype),
                              name="conv.bias")
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.add_bias(ops.conv2d(x, self.kernel, self.stride, self.padding),
                            self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.kernel, self.bias]


class ConvTranspose2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int, padding: int, rng: np.random.Generator, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = Parameter(
            _uniform_init(rng, (in_channels, out_channels, kernel_size, kernel_size),
                          fan_in, dtype),
            name="tconv.kernel")
        self.bias = Parameter(_uniform_init(rng, (out_channels,), fan_in, dtype),
                              name="tconv.bias")
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.add_bias(
            ops.conv2d_transposed(x, self.kernel, self.stride, self.padding), self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.kernel, self.bias]


class BatchNorm2d(Layer):
    """Optional per-channel normalization; batch stats while training, running
    stats otherwise."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name="bn.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name="bn.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.training = True

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            batch_mean = x.data.mean(axis=(0, 2, 3))
            batch_var = x.data.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(
                self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(
                self.running_var.dtype)
            return ops.batch_norm2d(x, self.gamma, self.beta)
        return ops.batch_norm2d_eval(x, self.gamma, self.beta,
                                     self.running_mean, self.running_var)

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Relu(Layer):
    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(x)


class LeakyRelu(Layer):
    def __init__(self, slope: float = 0.2):
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(x, self.slope)


class Sigmoid(Layer):
    def forward(self, x: Tensor) -> Tensor:
        return ops.sigmoid(x)


class Flatten(Layer):
    def forward(self, x: Tensor) -> Tensor:
        return ops.flatten(x)


class View(Layer):
    """Reshape the non-batch axes to a fixed target."""

    def __init__(self, target: Sequence[int]):
        self.target = tuple(target)

    def forward(self, x: Tensor) -> Tensor:
        return ops.reshape(x, (x.shape[0],) + self.target)


class Model:
    """Ordered composition of layers with shared bookkeeping."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Persistable state in deterministic order: parameters then buffers."""
        out: List[Tuple[str, np.ndarray]] = []
        for i, layer in enumerate(self.layers):
            for p in layer.parameters():
                out.append((f"layer{i}.{p.name}", p.data))
            for bname, buf in layer.buffers():
                out.append((f"layer{i}.{bname}", buf))
        return out

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        """Copy values into parameters/buffers in ``named_arrays`` order."""
        targets = self.named_arrays()
        if len(arrays) != len(targets):
            raise ConfigurationError(
                f"expected {len(targets)} arrays, got {len(arrays)}")
        for (name, dst), src in zip(targets, arrays):
            if dst.shape != src.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: model {dst.shape} vs archive {src.shape}")
            dst[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def train(self, flag: bool = True) -> None:
        for layer in self.layers:
            if hasattr(layer, "training"):
                layer.training = flag

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def conv_layer_count(self) -> int:
        return sum(1 for layer in self.layers if isinstance(layer, Conv2d))


class ClassifierModel(Model):
    """Substitute/victim classifier with its architecture metadata."""

    def __init__(self, layers: Sequence[Layer], arch_tag: str,
                 input_shape: Tuple[int, int, int], num_classes: int):
        super().__init__(layers)
        self.arch_tag = arch_tag
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes


def _down_size(h: int, stride: int, kernel: int, padding: int) -> int:
    span = h + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"spatial size {h} incompatible with kernel {kernel}, stride {stride}, "
            f"padding {padding}")
    return span // stride + 1


def build_classifier(arch_tag: str, input_shape: Sequence[int], num_classes: int,
                     seed: int = 0, dtype=np.float32,
                     batch_norm: bool = False) -> ClassifierModel:
    """Build a tagged classifier: 3/4/5 conv layers for small/medium/large.

    Stride-1 convs are 3x3 (padding 1); every second conv downsamples by two
    with a 4x4 kernel (padding 1), which halves even spatial sizes exactly.
    """
    if arch_tag not in ARCH_DEPTHS:
        raise ConfigurationError(
            f"unknown architecture tag {arch_tag!r}; expected one of {sorted(ARCH_DEPTHS)}")
    c, h, w = input_shape
    if h < 8 or w < 8:
        raise ConfigurationError(f"input spatial size must be >= 8, got {h}x{w}")
    depth = ARCH_DEPTHS[arch_tag]
    rng = np.random.default_rng(seed)

    layers: List[Layer] = []
    ci, hh, ww = c, h, w
    for i in range(depth):
        co = CHANNEL_SCHEDULE[i]
        if i % 2 == 1:
            kernel, stride = 4, 2
        else:
            kernel, stride = 3, 1
        layers.append(Conv2d(ci, co, kernel, stride, 1, rng, dtype))
        hh = _down_size(hh, stride, kernel, 1)
        ww = _down_size(ww, stride, kernel, 1)
        if batch_norm:
            layers.append(BatchNorm2d(co, dtype))
        layers.append(Relu())
        ci = co
    layers.append(Flatten())
    layers.append(Dense(ci * hh * ww, num_classes, rng, dtype))
    return ClassifierModel(layers, arch_tag, (c, h, w), num_classes)


@dataclass
class LatentBatch:
    """Sampled noise plus the class label requested for each sample."""

    z: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.z.shape[0]:
            raise ConfigurationError(
                f"labels shape {self.labels.shape} does not match noise {self.z.shape}")


def sample_latent(rng: np.random.Generator, batch_size: int, latent_dim: int,
                  num_classes: int, dtype=np.float32) -> LatentBatch:
    """Standard-normal noise and uniformly random requested labels."""
    z = Tensor(rng.standard_normal((batch_size, latent_dim)).astype(dtype))
    labels = rng.integers(0, num_classes, size=batch_size)
    return LatentBatch(z, labels)


class GeneratorModel:
    """N per-class upsampling branches feeding one shared convolutional net."""

    def __init__(self, branches: Sequence[Model], shared: Model, latent_dim: int,
                 output_shape: Tuple[int, int, int]):
        self.branches = list(branches)
        self.shared = shared
        self.latent_dim = latent_dim
        self.output_shape = tuple(output_shape)
        self.output_range = (0.0, 1.0)

    @property
    def num_classes(self) -> int:
        return len(self.branches)

    def generate(self, batch: LatentBatch) -> Tensor:
        """Route each sample through its requested branch, then the shared net.

        Differentiable end to end; sample order in the output matches the
        batch order.
        """
        labels = batch.labels
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise IndexError(
                f"requested label out of range [0, {self.num_classes})")
        parts = []
        positions = []
        for k in range(self.num_classes):
            idx = np.flatnonzero(labels == k)
            if idx.size == 0:
                continue
            parts.append(self.branches[k].forward(ops.take_rows(batch.z, idx)))
            positions.append(idx)
        merged = parts[0] if len(parts) == 1 else ops.concat_rows(parts)
        order = np.concatenate(positions)
        perm = np.empty(order.size, dtype=np.int64)
        perm[order] = np.arange(order.size)
        return self.shared.forward(ops.take_rows(merged, perm))

    def parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        for b in self.branches:
            out.extend(b.parameters())
        out.extend(self.shared.parameters())
        return out

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        out: List[Tuple[str, np.ndarray]] = []
        for k, b in enumerate(self.branches):
            out.extend((f"branch{k}.{n}", a) for n, a in b.named_arrays())
        out.extend((f"shared.{n}", a) for n, a in self.shared.named_arrays())
        return out

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        targets = self.named_arrays()
        if len(arrays) != len(targets):
            raise ConfigurationError(
                f"expected {len(targets)} arrays, got {len(arrays)}")
        for (name, dst), src in zip(targets, arrays):
            if dst.shape != src.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: model {dst.shape} vs archive {src.shape}")
            dst[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def train(self, flag: bool = True) -> None:
        for b in self.branches:
            b.train(flag)
        self.shared.train(flag)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def build_generator(num_classes: int, latent_dim: int, output_shape: Sequence[int],
                    seed: int = 0, dtype=np.float32, batch_norm: bool = False,
                    base_channels: int = 64) -> GeneratorModel:
    """Build the N-branch generator for ``output_shape`` = (channels, h, w).

    Each branch projects the noise to a (base_channels, h/4, w/4) map and
    upsamples twice by stride-2 transposed convs; the shared net applies two
    3x3 convs and a sigmoid, so outputs always land in [0, 1].
    """
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    c_out, h, w = output_shape
    if h % 4 or w % 4 or h < 4 or w < 4:
        raise ConfigurationError(
            f"output size {h}x{w} unreachable by the stride chain "
            f"(two stride-2 upsampling stages need sizes divisible by 4)")
    h0, w0 = h // 4, w // 4
    c0 = base_channels
    c1 = base_channels // 2
    rng = np.random.default_rng(seed)

    branches = []
    for _ in range(num_classes):
        layers: List[Layer] = [
            Dense(latent_dim, c0 * h0 * w0, rng, dtype),
            View((c0, h0, w0)),
            Relu(),
            ConvTranspose2d(c0, c1, 4, 2, 1, rng, dtype),
        ]
        if batch_norm:
            layers.append(BatchNorm2d(c1, dtype))
        layers += [Relu(), ConvTranspose2d(c1, c1, 4, 2, 1, rng, dtype)]
        if batch_norm:
            layers.append(BatchNorm2d(c1, dtype))
        layers.append(Relu())
        branches.append(Model(layers))

    shared_layers: List[Layer] = [Conv2d(c1, c1, 3, 1, 1, rng, dtype)]
    if batch_norm:
        shared_layers.append(BatchNorm2d(c1, dtype))
    shared_layers += [LeakyRelu(0.2), Conv2d(c1, c_out, 3, 1, 1, rng, dtype), Sigmoid()]
    shared = Model(shared_layers)
    return GeneratorModel(branches, shared, latent_dim, (c_out, h, w))


def generate(gen: GeneratorModel, batch: LatentBatch) -> Tensor:
    return gen.generate(batch)


def predict(model: ClassifierModel, x: Tensor):
    """Forward a batch: returns (logits, probs, labels).

    Labels are the row argmax with lowest-index tie-break.
    """
    logits = model.forward(x)
    probs = ops.softmax(logits)
    labels = ops.argmax_rows(probs)
    return logits, probs, labels


def forward_batched(model, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Memory-bounded forward over a large array; returns stacked logits."""
    outs = []
    for start in range(0, x.shape[0], chunk):
        outs.append(model.forward(Tensor(x[start:start + chunk])).data)
    return np.concatenate(outs, axis=0)


def accuracy(model, x: np.ndarray, labels: np.ndarray, chunk: int = 256) -> float:
    logits = forward_batched(model, x, chunk)
    return float((np.argmax(logits, axis=1) == labels).mean())


def train_classifier(model: ClassifierModel, x: np.ndarray, y: np.ndarray,
                     epochs: int, batch_size: int, lr: float,
                     rng: np.random.Generator, optimizer: str = "adam",
                     verbose: bool = False) -> None:
    """Supervised cross-entropy training; used to prepare victim models."""
    from .engine import Tape, make_optimizer

    opt = make_optimizer(optimizer, model.parameters(), lr)
    n = x.shape[0]
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            xb = Tensor(x[idx])
            with Tape() as tape:
                logits = model.forward(xb)
                loss = ops.cross_entropy(logits, y[idx])
            model.zero_grad()
            tape.backward(loss)
            opt.step()
            total += loss.item() * idx.size
        if verbose:
            print(f"epoch {epoch + 1}/{epochs}: train loss {total / n:.4f}")
