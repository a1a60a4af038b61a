"""Runtime instrumentation: operation counters and live-tensor byte accounting.

A :class:`Recorder` is activated with :func:`record`; code paths that care
(correlation, lookup, convolution hooks) report into whichever recorder is
active in the current context and are no-ops otherwise.
"""

from __future__ import annotations

import contextlib
import contextvars
import weakref
from collections import defaultdict
from typing import Iterator

import torch
from torch import nn

BYTES_PER_ELEMENT = 4

_active: contextvars.ContextVar["Recorder | None"] = contextvars.ContextVar(
    "recoverflow_recorder", default=None
)


class Recorder:
    """Counters plus a byte-accounting shim for live intermediate tensors.

    Tensor payloads are charged at 4 bytes/element when first tracked and
    released when the tracked tensor object is garbage collected. Storage
    shared between views is charged once.
    """

    def __init__(self) -> None:
        self.counters: dict[str, int] = defaultdict(int)
        self.live_bytes = 0
        self.peak_bytes = 0
        self._live: dict[int, int] = {}

    def add(self, name: str, amount: int = 1) -> None:
        self.counters[name] += int(amount)

    def track(self, tensor: torch.Tensor) -> torch.Tensor:
        key = tensor.untyped_storage().data_ptr()
        if key == 0 or key in self._live:
            return tensor
        nbytes = tensor.untyped_storage().nbytes() // tensor.element_size() * BYTES_PER_ELEMENT
        self._live[key] = nbytes
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        weakref.finalize(tensor, self._release, key)
        return tensor

    def _release(self, key: int) -> None:
        nbytes = self._live.pop(key, 0)
        self.live_bytes -= nbytes

    def __getitem__(self, name: str) -> int:
        return self.counters.get(name, 0)

    def snapshot(self) -> dict[str, int]:
        out = dict(self.counters)
        out["peak_bytes"] = self.peak_bytes
        return out


@contextlib.contextmanager
def record(recorder: Recorder | None = None) -> Iterator[Recorder]:
    rec = recorder if recorder is not None else Recorder()
    token = _active.set(rec)
    try:
        yield rec
    finally:
        _active.reset(token)


def active() -> Recorder | None:
    return _active.get()


def count(name: str, amount: int = 1) -> None:
    rec = _active.get()
    if rec is not None:
        rec.add(name, amount)


def track(tensor: torch.Tensor) -> torch.Tensor:
    rec = _active.get()
    if rec is not None and isinstance(tensor, torch.Tensor):
        rec.track(tensor)
    return tensor


def conv2d_flops(module: nn.Conv2d, output: torch.Tensor) -> int:
    """MAC-as-2 cost of one Conv2d call, summed over the batch."""
    kh, kw = module.kernel_size
    cin = module.in_channels // module.groups
    b, cout, ho, wo = output.shape
    return 2 * kh * kw * cin * cout * ho * wo * b


# model attribute name -> profiler component label
COMPONENT_PREFIXES = {
    "context": "context-network",
    "encoder": "feature-encoder",
    "refine": "refinement",
    "upmask": "upsampler",
}


def component_of(module_name: str) -> str:
    head = module_name.split(".", 1)[0]
    return COMPONENT_PREFIXES.get(head, "other")


@contextlib.contextmanager
def hooks(model: nn.Module) -> Iterator[None]:
    """Attach conv-flop counting and activation tracking hooks for the duration."""
    handles = []
    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d):
            comp = component_of(name)

            def conv_hook(mod, inputs, output, comp=comp):
                count(f"conv_flops/{comp}", conv2d_flops(mod, output))
                count("conv_flops", conv2d_flops(mod, output))
                track(output)

            handles.append(module.register_forward_hook(conv_hook))
        elif len(list(module.children())) == 0:

            def leaf_hook(mod, inputs, output):
                if isinstance(output, torch.Tensor):
                    track(output)

            handles.append(module.register_forward_hook(leaf_hook))
    try:
        yield
    finally:
        for h in handles:
            h.remove()
