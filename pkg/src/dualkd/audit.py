"""Parameter, parameter-memory and MAC accounting against the challenge budgets.

Conventions:
  * parameters = every trainable array (conv/linear weights and biases,
    batchnorm affine terms); batchnorm running statistics are excluded.
  * MACs per single-example inference; batchnorm, activations and pooling
    count as zero.
  * the memory budget is decimal: 128 kB = 128,000 bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .nn import LayerTrace

MEMORY_BUDGET_BYTES = 128_000
MAC_BUDGET = 30_000_000
FP16_BYTES = 2


@dataclass
class ComplexityReport:
    param_count: int
    param_memory_bytes: int
    macs: int
    input_shape: tuple
    dtype_width: int = FP16_BYTES
    layers: list[LayerTrace] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class BudgetVerdict:
    passed: bool
    memory_ok: bool
    macs_ok: bool
    memory_margin_bytes: int
    macs_margin: int
    memory_budget_bytes: int
    mac_budget: int
    param_memory_bytes: int
    macs: int

    def to_dict(self) -> dict:
        return asdict(self)


def _trace(net, input_shape) -> list[LayerTrace]:
    """Per-layer records for a Network or any single module (layers, Sequential, Residual)."""
    out = net.trace(tuple(input_shape))
    if isinstance(out, tuple):
        return out[1]
    return out


def count_params(net) -> int:
    """Works on a Network or any single module."""
    if hasattr(net, "parameters"):
        return sum(p.size for p in net.parameters().values())
    return sum(p.size for _, p in net.named_parameters())


def count_macs(net, input_shape) -> int:
    """MACs for one example of shape (C, H, W); the batch axis never multiplies the count."""
    return sum(r.macs for r in _trace(net, input_shape))


def complexity_report(net, input_shape, dtype_width: int = FP16_BYTES) -> ComplexityReport:
    layers = _trace(net, input_shape)
    params = sum(r.params for r in layers)
    return ComplexityReport(
        param_count=params,
        param_memory_bytes=params * dtype_width,
        macs=sum(r.macs for r in layers),
        input_shape=tuple(input_shape),
        dtype_width=dtype_width,
        layers=layers,
    )


def check_constraints(
    report: ComplexityReport,
    memory_bytes: int = MEMORY_BUDGET_BYTES,
    macs: int = MAC_BUDGET,
    dtype_width: int | None = None,
) -> BudgetVerdict:
    width = report.dtype_width if dtype_width is None else dtype_width
    mem = report.param_count * width
    mem_margin = memory_bytes - mem
    mac_margin = macs - report.macs
    return BudgetVerdict(
        passed=mem_margin >= 0 and mac_margin >= 0,
        memory_ok=mem_margin >= 0,
        macs_ok=mac_margin >= 0,
        memory_margin_bytes=mem_margin,
        macs_margin=mac_margin,
        memory_budget_bytes=memory_bytes,
        mac_budget=macs,
        param_memory_bytes=mem,
        macs=report.macs,
    )


def format_report(report: ComplexityReport, verdict: BudgetVerdict | None = None) -> str:
    lines = [f"{'layer':<40} {'kind':<18} {'out shape':<16} {'params':>8} {'MACs':>12}"]
    for r in report.layers:
        if r.params or r.macs:
            lines.append(f"{r.name:<40} {r.kind:<18} {str(r.out_shape):<16} {r.params:>8} {r.macs:>12,}")
    lines.append(f"input shape: {report.input_shape}")
    lines.append(f"parameters: {report.param_count:,} ({report.param_memory_bytes:,} bytes at {report.dtype_width} B/param)")
    lines.append(f"MACs: {report.macs:,}")
    if verdict is not None:
        status = "PASS" if verdict.passed else "FAIL"
        lines.append(
            f"budget {status}: memory margin {verdict.memory_margin_bytes:,} B of {verdict.memory_budget_bytes:,}, "
            f"MAC margin {verdict.macs_margin:,} of {verdict.mac_budget:,}"
        )
    return "\n".join(lines)


def report_json(report: ComplexityReport, verdict: BudgetVerdict) -> str:
    return json.dumps({"report": report.to_dict(), "verdict": verdict.to_dict(), "pass": verdict.passed}, indent=2)
