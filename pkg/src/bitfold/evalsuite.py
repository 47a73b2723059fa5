"""Metrics and experiment harness: token accuracies, folding evaluation,
and cluster-based diversity, reported as CSV / text / optional SVG.

bit accuracy >= index accuracy holds by construction: a correct index
implies all of its bits are correct, never the converse.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion as dfn
from . import geometry as geo
from . import tokenizer as tok
from .errors import LengthMismatch

CSV_HEADER = "id,rmsd,tm,bit_acc,index_acc"
DIVERSITY_TM_THRESHOLD = 0.5
DIVERSITY_N_SAMPLES = 40
DIVERSITY_LENGTHS = (60, 100, 160)


def _as_bits(tokens, k):
    tokens = np.asarray(tokens.data if isinstance(tokens, ad.Tensor) else tokens)
    if tokens.ndim == 2:
        return tokens
    return tok.index_to_bits(tokens, k)


def token_accuracy(pred, truth, k=None, exclude=None):
    """{bit_acc, index_acc} between predicted and true tokens.

    Inputs are (L, K) bit arrays or (L,) index arrays (k required then);
    `exclude` is an optional boolean vector of positions to skip (MASK/PAD).
    """
    pred_arr = np.asarray(pred.data if isinstance(pred, ad.Tensor) else pred)
    truth_arr = np.asarray(truth.data if isinstance(truth, ad.Tensor) else truth)
    if pred_arr.shape[0] != truth_arr.shape[0]:
        raise LengthMismatch(f"{pred_arr.shape[0]} vs {truth_arr.shape[0]}")
    if k is None:
        k = pred_arr.shape[1] if pred_arr.ndim == 2 else truth_arr.shape[1]
    pred_bits = _as_bits(pred_arr, k)
    truth_bits = _as_bits(truth_arr, k)
    keep = np.ones(pred_bits.shape[0], dtype=bool) if exclude is None else ~np.asarray(exclude)
    if not keep.any():
        return {"bit_acc": float("nan"), "index_acc": float("nan")}
    pb, tb = pred_bits[keep], truth_bits[keep]
    bit_acc = float(((pb > 0) == (tb > 0)).mean())
    index_acc = float(((pb > 0) == (tb > 0)).all(axis=1).mean())
    return {"bit_acc": bit_acc, "index_acc": index_acc}


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts: id, rmsd, tm, bit_acc, index_acc
    runtime: float = 0.0

    def aggregates(self):
        out = {}
        for key in ("rmsd", "tm", "bit_acc", "index_acc"):
            values = [r[key] for r in self.rows if np.isfinite(r[key])]
            out[key] = {
                "mean": float(np.mean(values)) if values else float("nan"),
                "median": float(np.median(values)) if values else float("nan"),
            }
        return out

    def to_csv(self):
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(f"{r['id']},{r['rmsd']:.6f},{r['tm']:.6f},{r['bit_acc']:.6f},{r['index_acc']:.6f}\n")
        return buf.getvalue()

    def summary(self):
        agg = self.aggregates()
        lines = [f"samples: {len(self.rows)}", f"runtime_s: {self.runtime:.3f}"]
        for key, stats in agg.items():
            lines.append(f"{key}: mean {stats['mean']:.4f} median {stats['median']:.4f}")
        return "\n".join(lines)


def folding_eval(lm, tokenizer_params, dataset, steps=25, strategy="confidence",
                 temperature=1.0, seed=0, resdiff_head=None):
    """Folding-mode generation and structure metrics per dataset item.

    `dataset` is a list of (structure, sequence) pairs with ground truth.
    """
    t0 = time.time()
    report = EvalReport()
    rng = np.random.default_rng(seed)
    for structure, seq in dataset:
        with ad.no_grad():
            z = tok.encode(structure, tokenizer_params)
        true_bits = np.where(z.data >= 0.0, 1.0, -1.0)
        out = dfn.generate(
            lm, len(structure), mode="folding", steps=steps, strategy=strategy,
            temperature=temperature, rng=rng, seq=np.asarray(seq),
        )
        pred_bits = out.struct_bits
        acc = token_accuracy(pred_bits, true_bits)
        decode_bits = pred_bits
        if resdiff_head is not None:
            from . import resdiff as rd

            lm_out = lm.forward(out)
            hidden = [h.data for h in lm_out.hidden_layers]
            with ad.no_grad():
                cond = rd.condition(pred_bits, hidden, resdiff_head)
            decode_bits = pred_bits + rd.resdiff_sample(cond.data, resdiff_head, rng)
        with ad.no_grad():
            coords = tok.decode(ad.Tensor(decode_bits), tokenizer_params).data
        pred = geo.BackboneStructure(coords, structure.chain_ids, structure.source_id)
        report.rows.append({
            "id": structure.source_id,
            "rmsd": geo.rmsd(pred, structure),
            "tm": geo.tm_score(pred, structure),
            "bit_acc": acc["bit_acc"],
            "index_acc": acc["index_acc"],
        })
    report.runtime = time.time() - t0
    return report


def diversity(samples, tm_threshold=DIVERSITY_TM_THRESHOLD):
    """Normalized cluster count in (0, 1] via greedy leader clustering.

    Samples are scanned in order; each joins the first cluster whose
    representative scores tm >= threshold against it, else founds a new
    cluster. Returns n_clusters / n_samples.
    """
    if not samples:
        raise ValueError("need at least one sample")
    length = len(samples[0])
    for s in samples[1:]:
        if len(s) != length:
            raise LengthMismatch(f"{len(s)} vs {length}")
    leaders = []
    for s in samples:
        for leader in leaders:
            if geo.tm_score(s, leader) >= tm_threshold:
                break
        else:
            leaders.append(s)
    return len(leaders) / len(samples)


def svg_scatter(points, path=None, width=480, height=320, xlabel="seconds per sample",
                ylabel="rmsd"):
    """Minimal SVG scatter of (x, y, label) triples (speed vs RMSD)."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs) or 1.0
    y_lo, y_hi = min(ys), max(ys) or 1.0
    span_x = (x_hi - x_lo) or 1.0
    span_y = (y_hi - y_lo) or 1.0
    pad = 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width // 2}" y="{height - 6}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="12" y="{height // 2}" font-size="11" transform="rotate(-90 12 {height // 2})" text-anchor="middle">{ylabel}</text>',
    ]
    for x, y, label in points:
        px = pad + (x - x_lo) / span_x * (width - 2 * pad)
        py = height - pad - (y - y_lo) / span_y * (height - 2 * pad)
        parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{px + 6:.1f}" y="{py - 6:.1f}" font-size="10">{label}</text>')
    parts.append("</svg>")
    text = "\n".join(parts)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
