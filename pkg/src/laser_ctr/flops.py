"""Closed-form FLOPs for the segmented model and its two comparators.

Each term keeps the formula it was evaluated from so a reader can audit the
(mixed) counting conventions. Everything is evaluated in exact rational
arithmetic and converted to float at the end.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction


@dataclass(frozen=True)
class FlopsConfig:
    seq_len: int = 1000
    embed_dim: int = 128
    qk_dim: int = 32
    segment_w: int = 10
    gsta_layers: int = 2
    ffn_ratio: int = 4

    @classmethod
    def from_laser(cls, cfg):
        return cls(cfg.seq_len, cfg.embed_dim, cfg.qk_dim, cfg.segment_w, cfg.gsta_layers, cfg.ffn_ratio)


DEFAULT_CONFIG = FlopsConfig()


@dataclass
class FlopsReport:
    name: str
    terms: dict[str, float]
    formulas: dict[str, str]
    config: FlopsConfig
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))

    def to_dict(self):
        return {
            "name": self.name, "total": self.total, "terms": self.terms,
            "formulas": self.formulas, "extra": self.extra, "config": asdict(self.config),
        }


def _report(name, cfg, parts, extra=None):
    return FlopsReport(
        name=name,
        terms={k: float(v) for k, (v, _) in parts.items()},
        formulas={k: f for k, (_, f) in parts.items()},
        config=cfg,
        extra=extra or {},
    )


def flops_sta(cfg: FlopsConfig) -> FlopsReport:
    L, d, dq, w, r = cfg.seq_len, cfg.embed_dim, cfg.qk_dim, cfg.segment_w, cfg.ffn_ratio
    Ls = Fraction(L, w)
    return _report("sta", cfg, {
        "proj": (L * d * d + L * d * dq, "L*d^2 + L*d*d_q"),
        "attn": (L * dq + L * d, "L*d_q + L*d"),
        "ffn": (Ls * 2 * r * d * d, "(L/w)*2*r*d^2"),
    })


def flops_gsta(cfg: FlopsConfig) -> FlopsReport:
    L, d, w, M = cfg.seq_len, cfg.embed_dim, cfg.segment_w, cfg.gsta_layers
    return _report("gsta", cfg, {
        "layers": (M * Fraction(L, w) * (2 * d * d + 2 * d), "M*(L/w)*(2*d^2 + 2*d)"),
    })


def laser_closed_form(cfg: FlopsConfig) -> float:
    """``L*d^2 * (1 + d_q/d + (2r + 2M)/w)``, the simplified total."""
    L, d, dq, w = cfg.seq_len, cfg.embed_dim, cfg.qk_dim, cfg.segment_w
    r, M = cfg.ffn_ratio, cfg.gsta_layers
    return float(L * d * d * (1 + Fraction(dq, d) + Fraction(2 * r + 2 * M, w)))


def flops_laser(cfg: FlopsConfig) -> FlopsReport:
    sta, gsta = flops_sta(cfg), flops_gsta(cfg)
    terms = {f"sta.{k}": (Fraction(v), sta.formulas[k]) for k, v in sta.terms.items()}
    terms.update({f"gsta.{k}": (Fraction(v), gsta.formulas[k]) for k, v in gsta.terms.items()})
    closed = laser_closed_form(cfg)
    total = sta.total + gsta.total
    return _report("laser", cfg, terms, extra={
        "closed_form": closed,
        "sum_of_parts": total,
        "closed_vs_parts": closed / total if total else 1.0,
    })


def flops_self_attention(cfg: FlopsConfig) -> FlopsReport:
    L, d = cfg.seq_len, cfg.embed_dim
    return _report("self_attention", cfg, {
        "proj": (4 * L * d * d, "4*L*d^2"),
        "attn": (2 * L * L * d, "2*L^2*d"),
    })


def flops_target_attention(cfg: FlopsConfig) -> FlopsReport:
    L, d = cfg.seq_len, cfg.embed_dim
    return _report("target_attention", cfg, {
        "proj": (2 * L * d * d, "2*L*d^2"),
        "attn": (2 * L * d, "2*L*d"),
    })


def compare_report(cfg: FlopsConfig = DEFAULT_CONFIG) -> dict:
    laser = flops_laser(cfg)
    sa = flops_self_attention(cfg)
    ta = flops_target_attention(cfg)
    laser_total = laser.extra["closed_form"]
    return {
        "config": asdict(cfg),
        "laser": laser.to_dict(),
        "self_attention": sa.to_dict(),
        "target_attention": ta.to_dict(),
        "ratio_sa_over_laser": sa.total / laser_total if laser_total else float("inf"),
        "ratio_laser_over_ta": laser_total / ta.total if ta.total else float("inf"),
    }


def format_report(rep: dict) -> str:
    lines = [
        "config " + " ".join(f"{k}={v}" for k, v in rep["config"].items()),
        f"laser            closed_form={rep['laser']['extra']['closed_form']:.6g}"
        f"  sum_of_parts={rep['laser']['extra']['sum_of_parts']:.6g}",
    ]
    for term, val in rep["laser"]["terms"].items():
        lines.append(f"  {term:<14} {val:>14.6g}  {rep['laser']['formulas'][term]}")
    for key in ("self_attention", "target_attention"):
        lines.append(f"{key:<16} total={rep[key]['total']:.6g}")
        for term, val in rep[key]["terms"].items():
            lines.append(f"  {term:<14} {val:>14.6g}  {rep[key]['formulas'][term]}")
    lines.append(f"ratio sa/laser   {rep['ratio_sa_over_laser']:.3f}")
    lines.append(f"ratio laser/ta   {rep['ratio_laser_over_ta']:.3f}")
    return "\n".join(lines)


def to_json(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True)
