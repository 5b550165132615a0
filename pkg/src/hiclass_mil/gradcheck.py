"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig, total_loss
from .model import ModelConfig, backward, flatten_params, forward, param_shapes, unflatten_params
from .numerics import finite_diff_grad, kl_softmax, relative_error
from .taxonomy import Taxonomy, balanced

TINY_DIMS = {"D": 8, "H": 8, "S": 4, "P": 4, "A": 4, "NC": 2, "NF": 4, "NP": 3}


class NearKink(Exception):
    """The sampled point sits too close to a non-differentiable point."""


def parse_dims(text: str | None) -> dict[str, int]:
    """Parse ``"D=8,H=8,S=4"``; unspecified keys keep the tiny defaults."""
    dims = dict(TINY_DIMS)
    if text:
        for item in text.split(","):
            key, _, value = item.partition("=")
            key = key.strip().upper()
            if key not in dims or not value.strip():
                raise ValueError(f"bad --dims entry {item!r}; keys are {','.join(TINY_DIMS)}")
            dims[key] = int(value)
    return dims


def tiny_problem(dims: dict[str, int], seed: int, integration: str = "bidirectional",
                 aggregator: str = "attention", param_scale: float = 0.5):
    """Random config, taxonomy, params, bag and labels for a gradient probe.

    Parameters are drawn N(0, param_scale^2) so every nonlinearity works
    outside its linear regime.
    """
    taxonomy = balanced(dims["NF"], dims["NC"])
    config = ModelConfig(
        dim=dims["D"], n_coarse=dims["NC"], n_fine=dims["NF"], hidden=dims["H"],
        split=dims["S"], proj=dims["P"], attn=dims["A"],
        integration=integration, aggregator=aggregator,
    )
    rng = np.random.default_rng(seed)
    params = {
        name: param_scale * rng.standard_normal(shape) for name, shape in param_shapes(config).items()
    }
    x = rng.standard_normal((dims["NP"], dims["D"]))
    fine = int(rng.integers(taxonomy.n_fine))
    return config, taxonomy, params, x, taxonomy.group_of(fine), fine


def check_safe(trace, taxonomy: Taxonomy, fine: int, loss_config: LossConfig, margin: float = 1e-3) -> None:
    """Raise NearKink when relu inputs, argmax gaps or hinge gaps are within ``margin``."""
    if np.min(np.abs(trace.z)) < margin:
        raise NearKink("relu input near zero")
    for logits in (trace.o_c, trace.o_f):
        if logits.size > 1:
            top2 = np.sort(logits)[-2:]
            if top2[1] - top2[0] < margin:
                raise NearKink("argmax near tie")
    if trace.max_index is not None:
        h_sorted = np.sort(trace.h, axis=0)
        # Ties among all-zero relu columns carry no gradient either way.
        live = h_sorted[-1] > 0
        if h_sorted.shape[0] > 1 and np.any(live & (h_sorted[-1] - h_sorted[-2] < margin)):
            raise NearKink("max-pool near tie")
    if loss_config.enable_int:
        for j in taxonomy.complement_of(fine):
            kl = kl_softmax(trace.f_f[fine], trace.f_f[j])[0]
            if abs(loss_config.alpha - kl) < margin:
                raise NearKink("hinge near kink")


@dataclass
class GradcheckResult:
    seed: int
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def failed_blocks(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed_blocks


def loss_function(config, taxonomy, x, coarse, fine, loss_config, frozen_cross=None):
    def f(flat):
        params = unflatten_params(flat, config)
        trace = forward(x, params, config, frozen_cross=frozen_cross)
        return total_loss(trace, coarse, fine, taxonomy, loss_config)[0].total
    return f


def analytic_gradient(config, taxonomy, params, x, coarse, fine, loss_config, stop_gradient=True):
    trace = forward(x, params, config)
    _, seeds = total_loss(trace, coarse, fine, taxonomy, loss_config)
    return backward(trace, params, config, seeds.d_o_c, seeds.d_o_f, seeds.d_f_c, seeds.d_f_f,
                    stop_gradient=stop_gradient)


def check_gradients(seed: int, dims: dict[str, int] | None = None,
                    loss_config: LossConfig = LossConfig(), integration: str = "bidirectional",
                    aggregator: str = "attention", h: float = 1e-5, tolerance: float = 1e-4,
                    corrupt: str | None = None) -> GradcheckResult:
    """Compare the gated analytic gradient with central differences.

    The reference function holds the gate-crossing copies constant at their
    current values, which is the function the gated reverse pass
    differentiates. ``corrupt`` names a parameter block whose analytic
    gradient is deliberately perturbed (negative control).

    Raises NearKink when the sampled point is too close to a kink.
    """
    config, taxonomy, params, x, coarse, fine = tiny_problem(dims or TINY_DIMS, seed, integration, aggregator)
    trace = forward(x, params, config)
    check_safe(trace, taxonomy, fine, loss_config)
    frozen = (trace.v_c.copy(), trace.v_f.copy())
    grads = analytic_gradient(config, taxonomy, params, x, coarse, fine, loss_config)
    if corrupt is not None:
        if corrupt not in grads:
            raise KeyError(f"unknown parameter block {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.01 + 1e-3
    f = loss_function(config, taxonomy, x, coarse, fine, loss_config, frozen_cross=frozen)
    numeric = unflatten_params(finite_diff_grad(f, flatten_params(params, config), h), config)
    result = GradcheckResult(seed=seed, tolerance=tolerance)
    for name in param_shapes(config):
        result.max_rel_error[name] = float(np.max(relative_error(grads[name], numeric[name])))
    return result
