"""Structure tokenizer: invariant encoder, lookup-free quantizer, bit/index
codec, and coordinate decoder, trainable for reconstruction.

The encoder sees only rigid-invariant inputs (windowed CA distance
profiles, backbone dihedrals, local-frame atom displacements), so its
tokens are exactly invariant under rigid transforms of the input. The
decoder is a small transformer over token rows with relative-position
attention bias and outputs coordinates centered at the CA centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import kernels, nn
from .autodiff import Affine, Linear, Module, Tensor
from .errors import (
    DegenerateInput,
    IndexOutOfRange,
    NonFiniteLoss,
    NonFiniteValue,
    ParseError,
    ShapeMismatch,
)
from .optim import Adam, warmup_linear_decay

N_FEATURES = 23  # 8 distance offsets + 6 dihedral sin/cos + 9 frame projections
DIST_OFFSETS = (-4, -3, -2, -1, 1, 2, 3, 4)

COMMIT_WEIGHT = 0.25
ENTROPY_WEIGHT = 0.1


@dataclass
class TokenizerConfig:
    k: int = 8  # bit width; codebook size 2^k
    width: int = 64
    blocks: int = 3
    heads: int = 4
    lr_peak: float = 1e-3
    warmup: int = 100


def mask_id(k):
    return 2**k


def pad_id(k):
    return 2**k + 1


# -- invariant featurization -------------------------------------------------

def invariant_features(structure: geo.BackboneStructure) -> np.ndarray:
    """(L, 23) rigid-invariant per-residue features."""
    ca = structure.ca()
    chain = structure.chain_ids
    length = len(structure)
    feats = np.zeros((length, N_FEATURES))
    idx = np.arange(length)
    for col, off in enumerate(DIST_OFFSETS):
        j = idx + off
        ok = (j >= 0) & (j < length)
        ok[ok] &= chain[j[ok]] == chain[idx[ok]]
        feats[ok, col] = np.linalg.norm(ca[j[ok]] - ca[ok], axis=1)
    feats[:, 8:14] = nn.backbone_dihedral_sincos(structure.coords, chain).data
    n_at, ca_at, c_at, o_at = (structure.coords[:, i, :] for i in range(4))
    e1 = _unit_rows(c_at - ca_at)
    normal = _unit_rows(np.cross(c_at - ca_at, n_at - ca_at))
    e2 = np.cross(normal, e1)
    frame = np.stack([e1, e2, normal], axis=2)  # (L, 3, 3) columns are axes
    for col, atom in enumerate((n_at, c_at, o_at)):
        rel = atom - ca_at
        feats[:, 14 + 3 * col : 17 + 3 * col] = np.einsum("li,lij->lj", rel, frame)
    return feats


def _unit_rows(v, eps=1e-12):
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), eps)


# -- model -------------------------------------------------------------------

class Encoder(Module):
    def __init__(self, rng, cfg: TokenizerConfig):
        w = cfg.width
        self.embed = Linear(rng, N_FEATURES, w)
        self.blocks = [nn.Transition(rng, w, ratio=2) for _ in range(cfg.blocks)]
        self.norm = Affine(w)
        self.head = Linear(rng, w, cfg.k)

    def __call__(self, feats):
        x = self.embed(feats if isinstance(feats, Tensor) else Tensor(feats))
        for block in self.blocks:
            x = x + block(x)
        hidden = self.norm(ad.layernorm(x))
        return self.head(hidden), hidden


class DecoderBlock(Module):
    def __init__(self, rng, cfg: TokenizerConfig):
        w = cfg.width
        self.norm = Affine(w)
        self.attn = nn.MultiHeadAttention(rng, w, cfg.heads)
        self.rel = nn.RelPosBias(rng, cfg.heads, d_value=w // cfg.heads)
        self.mlp = nn.Transition(rng, w, ratio=2)

    def __call__(self, x, positions):
        bias, rel_values = self.rel(positions)
        x = x + self.attn(self.norm(ad.layernorm(x)), bias=bias, rel_values=rel_values)
        return x + self.mlp(x)


class Decoder(Module):
    def __init__(self, rng, cfg: TokenizerConfig):
        w = cfg.width
        self.embed = Linear(rng, cfg.k, w)
        self.blocks = [DecoderBlock(rng, cfg) for _ in range(cfg.blocks)]
        self.norm = Affine(w)
        self.out = Linear(rng, w, 12)

    def __call__(self, tokens, positions):
        x = self.embed(tokens if isinstance(tokens, Tensor) else Tensor(tokens))
        for block in self.blocks:
            x = block(x, positions)
        coords = ad.reshape(self.out(self.norm(ad.layernorm(x))), (-1, 4, 3))
        center = coords[:, 1, :].mean(axis=0)
        return coords - center


class TokenizerParams(Module):
    def __init__(self, cfg: TokenizerConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg_k = cfg.k
        self.encoder = Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)


def encode(structure, params: TokenizerParams):
    """Continuous tokens (L, K) from rigid-invariant features."""
    z, _ = params.encoder(invariant_features(structure))
    return z


def decode(tokens, params: TokenizerParams, position_indices=None):
    """Coordinates (L, 4, 3), CA-centroid centered, from cont or bit tokens."""
    length = tokens.shape[0]
    if position_indices is None:
        position_indices = np.arange(length)
    return params.decoder(tokens, position_indices)


# -- lookup-free quantization ------------------------------------------------

def lfq_quantize(z):
    """Dimension-wise sign quantization with straight-through gradients.

    Returns (bits in {-1,+1} with identity surrogate gradient, losses):
    commitment = mean (z - sg(bits))^2; entropy regularizer rewards
    balanced per-dimension bit usage across the batch axis.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    bits = ad.sign_ste(z)
    hard = Tensor(np.where(z.data >= 0.0, 1.0, -1.0))  # stop-gradient copy
    commitment = ((z - hard) ** 2).mean()
    p = ad.sigmoid(z).mean(axis=0)
    eps = 1e-9
    entropy_per_dim = -(p * ad.log(p + eps) + (1.0 - p) * ad.log(1.0 - p + eps))
    entropy = -entropy_per_dim.mean()  # minimized => entropy maximized
    return bits, {"commitment": commitment, "entropy": entropy}


# -- bit/index codec ---------------------------------------------------------

def bits_to_index(bits):
    """z_index = sum_k 1(bit_k > 0) * 2^(k-1); bit k=1 is the LSB."""
    bits = np.asarray(bits.data if isinstance(bits, Tensor) else bits)
    if bits.ndim != 2:
        raise ShapeMismatch(f"bits must be (L, K), got {bits.shape}")
    weights = 2 ** np.arange(bits.shape[1], dtype=np.int64)
    return ((bits > 0).astype(np.int64) * weights).sum(axis=1)


def index_to_bits(indices, k):
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= 2**k):
        raise IndexOutOfRange(f"indices outside [0, {2**k})")
    shifted = (indices[:, None] >> np.arange(k)) & 1
    return np.where(shifted > 0, 1.0, -1.0)


# -- token file format -------------------------------------------------------

def format_token_file(k, indices=None, bits=None, masked=None):
    """TOK v1 text; MASK rows as 'M', PAD rows as 'P'."""
    if (indices is None) == (bits is None):
        raise ValueError("provide exactly one of indices, bits")
    length = len(indices) if indices is not None else len(bits)
    masked = np.zeros(length, dtype=bool) if masked is None else np.asarray(masked, dtype=bool)
    lines = [f"TOK v1 K={k} L={length}"]
    for i in range(length):
        if indices is not None and indices[i] == pad_id(k):
            lines.append("P")
        elif masked[i] or (indices is not None and indices[i] == mask_id(k)):
            lines.append("M")
        elif indices is not None:
            lines.append(str(int(indices[i])))
        else:
            lines.append(" ".join(f"{int(b):+d}" for b in bits[i]))
    return "\n".join(lines) + "\n"


def parse_token_file(text):
    """Returns (k, indices) with MASK/PAD ids in place; bit files are
    converted to indices."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("TOK v1"):
        raise ParseError("missing 'TOK v1' header", line_no=1)
    try:
        header = dict(part.split("=") for part in lines[0].split()[2:])
        k, length = int(header["K"]), int(header["L"])
    except (KeyError, ValueError):
        raise ParseError("malformed TOK header", line_no=1)
    if len(lines) - 1 != length:
        raise ParseError(f"expected {length} rows, found {len(lines) - 1}", line_no=len(lines))
    out = np.empty(length, dtype=np.int64)
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if parts == ["M"]:
            out[i - 2] = mask_id(k)
        elif parts == ["P"]:
            out[i - 2] = pad_id(k)
        elif len(parts) == 1:
            val = int(parts[0])
            if not 0 <= val < 2**k:
                raise ParseError(f"index {val} out of range", line_no=i)
            out[i - 2] = val
        elif len(parts) == k:
            bits = np.array([[float(p) for p in parts]])
            out[i - 2] = bits_to_index(bits)[0]
        else:
            raise ParseError(f"expected 1 or {k} fields, got {len(parts)}", line_no=i)
    return k, out


# -- reconstruction loss and training ----------------------------------------

def reconstruction_loss(pred_coords, target: geo.BackboneStructure, dist_weight=0.25):
    """Rigid-alignment coordinate MSE plus a CA distance-matrix term.

    The target is superposed onto the current prediction with a proper
    rotation computed outside the autodiff graph; since that rotation is
    the minimizer over rigid moves, treating it as a constant gives the
    exact gradient of the aligned loss. Proper rotations only, so
    mirror-image reconstructions remain expensive."""
    pred_ca_data = pred_coords.data[:, 1, :]
    try:
        res = geo.kabsch_points(target.ca(), pred_ca_data)
        aligned = target.coords @ res.rotation.T + res.translation
    except DegenerateInput:
        aligned = target.coords - target.ca().mean(axis=0) + pred_ca_data.mean(axis=0)
    coord_term = ((pred_coords - aligned) ** 2).mean()
    d_true = kernels.pdist(target.ca(), 1e-8)
    dist_term = ((ad.pair_dist(pred_coords[:, 1, :]) - d_true) ** 2).mean()
    return coord_term + dist_weight * dist_term


@dataclass
class ReconReport:
    cont_rmsd: list = field(default_factory=list)
    cont_tm: list = field(default_factory=list)
    quant_rmsd: list = field(default_factory=list)
    quant_tm: list = field(default_factory=list)

    def summary(self):
        mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
        return {
            "cont_rmsd": mean(self.cont_rmsd),
            "cont_tm": mean(self.cont_tm),
            "quant_rmsd": mean(self.quant_rmsd),
            "quant_tm": mean(self.quant_tm),
        }


def reconstruction_report(params, dataset, position_indices=None):
    """Per-sample Kabsch RMSD and TM on both token paths."""
    report = ReconReport()
    for i, structure in enumerate(dataset):
        pos = None if position_indices is None else position_indices[i]
        with ad.no_grad():
            z = encode(structure, params)
            pred_c = decode(z, params, pos)
            bits = Tensor(np.where(z.data >= 0.0, 1.0, -1.0))
            pred_q = decode(bits, params, pos)
        for pred, rs, ts in (
            (pred_c, report.cont_rmsd, report.cont_tm),
            (pred_q, report.quant_rmsd, report.quant_tm),
        ):
            got = geo.BackboneStructure(pred.data, structure.chain_ids, structure.source_id)
            rs.append(geo.rmsd(got, structure))
            ts.append(geo.tm_score(got, structure))
    return report


def train_tokenizer(dataset, cfg: TokenizerConfig, seed, steps, report_dataset=None,
                    position_indices=None, log_every=0):
    """Returns (params, ReconReport). Loss: 0.5*(cont + quant reconstruction)
    + 0.25*commitment + 0.1*entropy regularizer."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    params = TokenizerParams(cfg, seed=seed)
    opt = Adam(params.parameters())
    rng = np.random.default_rng(seed + 1)
    feats = [invariant_features(s) for s in dataset]
    for step in range(steps):
        i = int(rng.integers(len(dataset)))
        structure = dataset[i]
        pos = None if position_indices is None else position_indices[i]
        if pos is None:
            pos = np.arange(len(structure))
        try:
            z, _ = params.encoder(feats[i])
            bits, q_losses = lfq_quantize(z)
            pred_q = params.decoder(bits, pos)
            pred_c = params.decoder(z, pos)
            loss = (
                0.5 * (reconstruction_loss(pred_q, structure) + reconstruction_loss(pred_c, structure))
                + COMMIT_WEIGHT * q_losses["commitment"]
                + ENTROPY_WEIGHT * q_losses["entropy"]
            )
            opt.zero_grad()
            loss.backward()
        except NonFiniteValue as exc:
            raise NonFiniteLoss(f"non-finite tokenizer loss at step {step}: {exc}")
        opt.step(lr=warmup_linear_decay(step, steps, peak=cfg.lr_peak, warmup=cfg.warmup))
        if log_every and step % log_every == 0:
            print(f"tokenizer step {step}: loss {loss.item():.4f}")
    report = reconstruction_report(params, report_dataset or dataset)
    return params, report
