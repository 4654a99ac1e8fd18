"""Question-dependent (QD) vs question-independent (QI) weight accounting.

Two independent counters act as mutual oracles: ``count_analytic`` derives
every parameter's element count from closed forms over the configuration,
while ``enumerate_params`` walks an instantiated model. They must agree row
for row. ``compare_table1`` evaluates the closed forms at the full published
scale (512 channels, 8 groups, h=198) where instantiation would not fit in
memory.

The headline QD number is the second predictor FC (hidden x predicted kernel
elements): that matrix dominates and is the only reading under which a single
hidden width reproduces the whole published ablation column. The first FC is
reported on its own line; biases are tallied separately and excluded from
the headline QD/QI totals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hybrid import QGHCConfig
from .model import ModelConfig, VQAModel


class AuditError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamRow:
    name: str
    count: int
    role: str       # "qd" | "qi"
    bias: bool


@dataclass
class AuditReport:
    rows: list[ParamRow]
    config: ModelConfig
    totals: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.totals:
            self.totals = _totals(self.rows)

    def total_elements(self) -> int:
        return self.totals["total"]


def _totals(rows: list[ParamRow]) -> dict[str, int]:
    t = {"qd_second_fc": 0, "qd_first_fc": 0, "qd_weights": 0, "qd_biases": 0,
         "qi_weights": 0, "qi_biases": 0, "total": 0}
    for r in rows:
        t["total"] += r.count
        key = f"{r.role}_{'biases' if r.bias else 'weights'}"
        t[key] += r.count
        if r.role == "qd" and not r.bias:
            if r.name.endswith(".fc2.weight"):
                t["qd_second_fc"] += r.count
            elif r.name.endswith(".fc1.weight"):
                t["qd_first_fc"] += r.count
    return t


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def _bn_rows(name: str, channels: int) -> list[ParamRow]:
    return [ParamRow(f"{name}.gamma", channels, "qi", False),
            ParamRow(f"{name}.beta", channels, "qi", False)]


def _predictor_rows(name: str, d_q: int, hidden: int, predicted: int) -> list[ParamRow]:
    return [ParamRow(f"{name}.fc1.weight", d_q * hidden, "qd", False),
            ParamRow(f"{name}.fc1.bias", hidden, "qd", True),
            ParamRow(f"{name}.fc2.weight", hidden * predicted, "qd", False),
            ParamRow(f"{name}.fc2.bias", predicted, "qd", True)]


def stack_rows(config: QGHCConfig, kind: str, name: str = "stack") -> list[ParamRow]:
    """Closed-form rows for one hybrid-convolution stack of the given kind."""
    rows: list[ParamRow] = []
    n_grp = config.groups
    d_q, h = config.question_dim, config.predictor_hidden
    for k in range(config.modules):
        c_in = config.module_in(k)
        c_out = config.c_out
        mod = f"{name}.{k}"
        predicted = config.predicted_elements_per_module(kind, k)
        if kind == "naive":
            rows += _predictor_rows(f"{mod}.predictor", d_q, h, predicted)
            continue
        if kind == "full":
            mid = c_in // 2
            rows.append(ParamRow(f"{mod}.conv1.kernel", mid * c_in, "qi", False))
            rows += _bn_rows(f"{mod}.bn1", mid)
            rows += _predictor_rows(f"{mod}.predictor", d_q, h, predicted)
            rows += _bn_rows(f"{mod}.bn2", mid)
            rows.append(ParamRow(f"{mod}.conv3.kernel", c_out * mid, "qi", False))
            rows += _bn_rows(f"{mod}.bn3", c_out)
            rows.append(ParamRow(f"{mod}.shortcut.kernel", c_in * c_out, "qi", False))
            continue
        # hybrid / group residual module
        m = config.module_mid(k)
        n_dyn = n_grp if kind == "group" else config.dynamic_groups
        dynamic = (tuple(range(n_grp)) if kind == "group"
                   else tuple(sorted(config.indices_for(k))))
        rows.append(ParamRow(f"{mod}.stage1.kernel", n_grp * (c_in // n_grp) * m,
                             "qi", False))
        rows += _bn_rows(f"{mod}.bn1", n_grp * m)
        for g in range(n_grp):
            if g in dynamic:
                continue
            rows.append(ParamRow(f"{mod}.stage2.free{g}.v", 9 * m * m, "qi", False))
            rows.append(ParamRow(f"{mod}.stage2.free{g}.gain", m, "qi", False))
        rows += _bn_rows(f"{mod}.bn2", n_grp * m)
        rows.append(ParamRow(f"{mod}.stage3.kernel", n_grp * m * (c_out // n_grp),
                             "qi", False))
        rows += _bn_rows(f"{mod}.bn3", c_out)
        rows.append(ParamRow(f"{mod}.shortcut.kernel", c_in * c_out, "qi", False))
        if n_dyn:
            rows += _predictor_rows(f"{mod}.predictor", d_q, h, predicted)
    return rows


def count_analytic(config: ModelConfig) -> AuditReport:
    """Closed-form audit of a full model, mirroring construction order."""
    rows: list[ParamRow] = []
    v, e, d = config.vocab_size, config.embed_dim, config.gru_hidden
    a = config.num_answers
    rows.append(ParamRow("question.embed.table", v * e, "qi", False))
    rows += [ParamRow("question.gru.w_z", e * d, "qi", False),
             ParamRow("question.gru.u_z", d * d, "qi", False),
             ParamRow("question.gru.w_r", e * d, "qi", False),
             ParamRow("question.gru.u_r", d * d, "qi", False),
             ParamRow("question.gru.w_h", e * d, "qi", False),
             ParamRow("question.gru.u_h", d * d, "qi", False),
             ParamRow("question.gru.b_z", d, "qi", True),
             ParamRow("question.gru.b_r", d, "qi", True),
             ParamRow("question.gru.b_h", d, "qi", True)]
    if config.fusion != "blind":
        w1, w2 = config.encoder_channels
        c = config.channels
        rows.append(ParamRow("encoder.conv1.kernel", w1 * 3 * 9, "qi", False))
        rows += _bn_rows("encoder.bn1", w1)
        rows.append(ParamRow("encoder.conv2.kernel", w2 * w1 * 9, "qi", False))
        rows += _bn_rows("encoder.bn2", w2)
        rows.append(ParamRow("encoder.conv3.kernel", c * w2 * 9, "qi", False))
        rows += _bn_rows("encoder.bn3", c)
    if config.fusion in ("qghc", "qghc+concat"):
        rows += stack_rows(config.qghc_config(), config.variant)
    if config.head == "attention" and config.fusion != "blind":
        c = config.channels
        rows.append(ParamRow("head.score_conv.kernel", c, "qi", False))
        rows.append(ParamRow("head.proj.weight", d * c, "qi", False))
        rows.append(ParamRow("head.proj.bias", c, "qi", True))
    hidden = 2 * a
    rows += [ParamRow("classifier.fc1.weight", config.feature_dim() * hidden, "qi", False),
             ParamRow("classifier.fc1.bias", hidden, "qi", True),
             ParamRow("classifier.fc2.weight", hidden * a, "qi", False),
             ParamRow("classifier.fc2.bias", a, "qi", True)]
    return AuditReport(rows, config)


def enumerate_params(model: VQAModel) -> AuditReport:
    """Walk the instantiated model's parameters and classify by role tag."""
    rows = []
    for name, p in model.named_parameters():
        if p.role not in ("qd", "qi"):
            raise AuditError(f"parameter {name} has no valid role tag")
        in_predictor = ".predictor." in name
        if in_predictor != (p.role == "qd"):
            raise AuditError(f"parameter {name} role {p.role!r} does not match "
                             f"its position {'inside' if in_predictor else 'outside'} "
                             f"the kernel-prediction stack")
        rows.append(ParamRow(name, int(np.prod(p.shape)), p.role, p.bias))
    return AuditReport(rows, model.config)


def reports_equal(a: AuditReport, b: AuditReport) -> bool:
    return a.rows == b.rows


# ---------------------------------------------------------------------------
# published ablation column
# ---------------------------------------------------------------------------

def _full_scale(kind: str = "hybrid", **overrides) -> tuple[str, QGHCConfig]:
    defaults = dict(c_in=512, c_out=512, groups=8, dynamic_groups=1,
                    question_dim=2400, predictor_hidden=198, modules=3)
    defaults.update(overrides)
    return kind, QGHCConfig(**defaults)


@dataclass(frozen=True)
class Table1Row:
    label: str
    kind: str
    config: QGHCConfig
    published_qd: float
    gated: bool               # False for the one row no single h reproduces
    note: str = ""


TABLE1_ROWS: tuple[Table1Row, ...] = (
    Table1Row("QGHC", *_full_scale("hybrid"), 5.4e6, True),
    Table1Row("QGHC-1", *_full_scale("hybrid", modules=1), 1.8e6, True),
    Table1Row("QGHC-2", *_full_scale("hybrid", modules=2), 3.6e6, True),
    Table1Row("QGHC-4", *_full_scale("hybrid", modules=4), 7.2e6, True),
    Table1Row("QGHC-1/2", *_full_scale("hybrid", mid_channels=16), 1.3e6, True),
    Table1Row("QGHC-group 4", *_full_scale("hybrid", groups=4), 8.7e6, False,
              "unreconciled: no hidden width fits this row and the others"),
    Table1Row("QGHC-group 16", *_full_scale("hybrid", groups=16), 1.3e6, True),
    Table1Row("QGHC-1-naive", *_full_scale("naive", modules=1), 471e6, True),
    Table1Row("QGHC-1-full", *_full_scale("full", modules=1), 117e6, True),
    Table1Row("QGHC-1-group", *_full_scale("group", modules=1), 14e6, True),
)

FULL_SINGLE_MODULE_CLAIM = 117e6  # published cost of predicting one full 3x3x256x256 kernel


def qd_second_fc(config: QGHCConfig, kind: str) -> int:
    """h x (predicted kernel elements), summed over modules."""
    return sum(config.predictor_hidden * config.predicted_elements_per_module(kind, k)
               for k in range(config.modules))


@dataclass(frozen=True)
class Table1Comparison:
    label: str
    analytic: int
    published: float
    deviation: float
    gated: bool
    note: str

    @property
    def flagged(self) -> bool:
        return abs(self.deviation) > 0.10


def compare_table1(rows: tuple[Table1Row, ...] = TABLE1_ROWS) -> list[Table1Comparison]:
    out = []
    for row in rows:
        analytic = qd_second_fc(row.config, row.kind)
        deviation = (analytic - row.published_qd) / row.published_qd
        out.append(Table1Comparison(row.label, analytic, row.published_qd,
                                    deviation, row.gated, row.note))
    return out


def render_table1(comparisons: list[Table1Comparison]) -> str:
    lines = [f"{'model':<16} {'analytic QD':>14} {'published':>12} {'dev %':>8}  flag"]
    for c in comparisons:
        flag = ""
        if c.note:
            flag = c.note
        elif c.flagged:
            flag = "EXCEEDS 10%"
        lines.append(f"{c.label:<16} {c.analytic:>14,} {c.published:>12,.0f} "
                     f"{100 * c.deviation:>7.2f}%  {flag}")
    return "\n".join(lines)


def render_report(report: AuditReport, show_rows: bool = True) -> str:
    lines = []
    if show_rows:
        lines.append(f"{'parameter':<36} {'count':>12} {'role':>5} {'bias':>5}")
        for r in report.rows:
            lines.append(f"{r.name:<36} {r.count:>12,} {r.role:>5} "
                         f"{'yes' if r.bias else '':>5}")
        lines.append("-" * 62)
    t = report.totals
    lines += [
        f"QD second FC (headline): {t['qd_second_fc']:,}",
        f"QD first FC:             {t['qd_first_fc']:,}",
        f"QD weights total:        {t['qd_weights']:,}",
        f"QD biases:               {t['qd_biases']:,}",
        f"QI weights total:        {t['qi_weights']:,}",
        f"QI biases:               {t['qi_biases']:,}",
        f"all parameters:          {t['total']:,}",
    ]
    return "\n".join(lines)


def report_csv(report: AuditReport) -> str:
    lines = ["name,count,role,bias"]
    for r in report.rows:
        lines.append(f"{r.name},{r.count},{r.role},{int(r.bias)}")
    return "\n".join(lines)
