"""Command-line interface.

Subcommands: gen-data, train-tokenizer, train-lm, finetune-fm,
train-resdiff, sample, eval, grad-check, bench. All randomness derives
from --seed; configuration comes from --config files with --set key=value
overrides. Exit code 2 on usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import diffusion as dfn
from . import evalsuite
from . import geo_arch
from . import geometry as geo
from . import hybrid_fm
from . import kernels
from . import repa as repa_mod
from . import resdiff as rd
from . import tokenizer as tok
from . import training
from .config import check_architecture, format_config, load_config
from .errors import BitfoldError


# -- dataset layout -----------------------------------------------------------

def write_sample(directory, structure, seq):
    base = os.path.join(directory, structure.source_id)
    with open(base + ".bkb", "w") as fh:
        fh.write(geo.write_backbone(structure))
    with open(base + ".seq", "w") as fh:
        fh.write(" ".join(str(int(a)) for a in seq) + "\n")


def load_dataset(directory):
    """Sorted (structure, sequence) pairs from `<id>.bkb` / `<id>.seq` files."""
    items = []
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".bkb"):
            continue
        base = os.path.join(directory, name[: -len(".bkb")])
        structure = geo.load_backbone(base + ".bkb")
        with open(base + ".seq") as fh:
            seq = np.array([int(x) for x in fh.read().split()], dtype=np.int64)
        items.append((structure, seq))
    return items


# -- checkpoint helpers -------------------------------------------------------

def _save_model(path, module, cfg, step=0, extra=None):
    params = dict(module.parameters())
    if extra:
        for prefix, mod in extra.items():
            params.update(mod.parameters(prefix=prefix + "."))
    ckpt.save_checkpoint(path, params, format_config(cfg), step=step)


def load_lm(path, cfg):
    tensors, stored, step, _ = ckpt.load_checkpoint(path)
    check_architecture(stored, cfg)
    lm = training.build_lm(cfg)
    lm_tensors = {k: v for k, v in tensors.items() if not k.startswith("repa.")}
    ckpt.restore_parameters(lm, lm_tensors)
    return lm, step


def load_tokenizer(path, cfg):
    tensors, stored, _, _ = ckpt.load_checkpoint(path)
    check_architecture(stored, cfg)
    params = tok.TokenizerParams(
        tok.TokenizerConfig(k=cfg.k, width=cfg.tok_width, blocks=cfg.tok_blocks, heads=cfg.tok_heads)
    )
    ckpt.restore_parameters(params, tensors)
    return params


def _tok_cfg(cfg):
    return tok.TokenizerConfig(k=cfg.k, width=cfg.tok_width, blocks=cfg.tok_blocks, heads=cfg.tok_heads)


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_config(args.config, args.set or [])
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.n):
        length = int(rng.integers(args.min_len, args.max_len + 1))
        chains = 2 if (args.chains == 2 or (args.chains == 0 and rng.random() < 0.2)) else 1
        structure, seq = geo.synth_backbone(
            geo.SynthSpec(length=length, chains=chains), seed=args.seed * 100003 + i
        )
        structure.source_id = f"synth{i:05d}"
        write_sample(args.out, structure, seq)
    print(f"wrote {args.n} samples to {args.out}")
    del cfg
    return 0


def cmd_train_tokenizer(args):
    cfg = load_config(args.config, args.set or [])
    dataset = load_dataset(args.data)
    structures = [s for s, _ in dataset]
    params, report = tok.train_tokenizer(
        structures, _tok_cfg(cfg), seed=args.seed, steps=args.steps,
        log_every=args.log_every,
    )
    _save_model(args.out, params, cfg, step=args.steps)
    print("reconstruction:", report.summary())
    return 0


def cmd_train_lm(args):
    cfg = load_config(args.config, args.set or [])
    cfg.seed = args.seed
    cfg.steps = args.steps
    dataset = load_dataset(args.data)
    tokenizer_params = load_tokenizer(args.tokenizer, cfg)
    lm = training.build_lm(cfg)
    repa_head = None
    store = None
    if cfg.repa_enabled:
        repa_head = repa_mod.RepaHead(cfg.d_model, cfg.tok_width, cfg.n_blocks, seed=args.seed)
        store = repa_mod.precompute_targets(tokenizer_params, [s for s, _ in dataset])
    losses = training.train_lm(
        lm, tokenizer_params, dataset, cfg, repa_head=repa_head, target_store=store,
        log_every=args.log_every,
    )
    extra = {"repa": repa_head} if repa_head is not None else None
    _save_model(args.out, lm, cfg, step=args.steps, extra=extra)
    if losses:
        print(f"final loss {losses[-1]:.4f} over {len(losses)} steps")
    else:
        print("loss report empty")
    return 0


def cmd_finetune_fm(args):
    cfg = load_config(args.config, args.set or [])
    dataset = load_dataset(args.data)
    tokenizer_params = load_tokenizer(args.tokenizer, cfg)
    lm, _ = load_lm(args.ckpt, cfg)
    models = hybrid_fm.HybridModels(tokenizer=tokenizer_params, lm=lm)
    hybrid_fm.fm_finetune(
        models, dataset, steps=args.steps, seed=args.seed,
        peak=cfg.lr_peak, warmup=min(cfg.warmup, max(args.steps // 10, 1)),
        log_every=args.log_every,
    )
    _save_model(args.out, lm, cfg, step=args.steps)
    return 0


def cmd_train_resdiff(args):
    cfg = load_config(args.config, args.set or [])
    dataset = load_dataset(args.data)
    tokenizer_params = load_tokenizer(args.tokenizer, cfg)
    lm, _ = load_lm(args.ckpt, cfg)
    head = rd.ResDiffHead(
        k=cfg.k, d_hidden=cfg.resdiff_hidden, n_layers=cfg.resdiff_layers,
        d_lm=cfg.d_model, n_lm_layers=cfg.n_blocks, t_r=cfg.resdiff_t_r, seed=args.seed,
    )
    samples = []
    for structure, seq in dataset:
        with ad.no_grad():
            z = tok.encode(structure, tokenizer_params)
        bits = np.where(z.data >= 0.0, 1.0, -1.0)
        state = dfn.TokenState.observed(seq, bits)
        with ad.no_grad():
            out = lm.forward(state)
        hidden = [h.data for h in out.hidden_layers]
        samples.append((rd.residual(z.data, bits), bits, hidden))
    rd.train_resdiff(
        samples_or_steps_guard(samples), head, steps=args.steps, seed=args.seed,
        warmup=min(2000, max(args.steps // 10, 1)), log_every=args.log_every,
    )
    _save_model(args.out, head, cfg, step=args.steps)
    return 0


def samples_or_steps_guard(samples):
    if not samples:
        raise ValueError("dataset produced no training samples")
    return samples


def cmd_sample(args):
    cfg = load_config(args.config, args.set or [])
    tokenizer_params = load_tokenizer(args.tokenizer, cfg)
    lm, _ = load_lm(args.ckpt, cfg)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        if cfg.fm_enabled:
            models = hybrid_fm.HybridModels(tokenizer=tokenizer_params, lm=lm)
            structure = hybrid_fm.fm_generate(models, args.length, rng, n_steps=cfg.fm_n_steps)
        else:
            state = dfn.generate(
                lm, args.length, mode="unconditional", steps=args.steps,
                strategy=args.strategy, temperature=args.temperature, rng=rng,
            )
            with ad.no_grad():
                coords = tok.decode(ad.Tensor(state.struct_bits), tokenizer_params).data
            structure = geo.BackboneStructure(coords, np.zeros(args.length, dtype=int))
        structure.source_id = f"sample{i:04d}"
        with open(os.path.join(args.out, f"{structure.source_id}.bkb"), "w") as fh:
            fh.write(geo.write_backbone(structure))
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config, args.set or [])
    tokenizer_params = load_tokenizer(args.tokenizer, cfg)
    if args.mode == "folding":
        dataset = load_dataset(args.data)
        lm, _ = load_lm(args.ckpt, cfg)
        head = None
        if args.resdiff:
            head = rd.ResDiffHead(
                k=cfg.k, d_hidden=cfg.resdiff_hidden, n_layers=cfg.resdiff_layers,
                d_lm=cfg.d_model, n_lm_layers=cfg.n_blocks, t_r=cfg.resdiff_t_r,
            )
            tensors, stored, _, _ = ckpt.load_checkpoint(args.resdiff)
            check_architecture(stored, cfg)
            ckpt.restore_parameters(head, tensors)
        report = evalsuite.folding_eval(
            lm, tokenizer_params, dataset, steps=args.steps, seed=args.seed, resdiff_head=head,
        )
        if args.csv:
            with open(args.csv, "w") as fh:
                fh.write(report.to_csv())
        print(report.summary())
    elif args.mode == "diversity":
        samples = [geo.load_backbone(os.path.join(args.data, name))
                   for name in sorted(os.listdir(args.data)) if name.endswith(".bkb")]
        print(f"diversity: {evalsuite.diversity(samples):.4f} over {len(samples)} samples")
    else:
        raise ValueError(f"unknown eval mode {args.mode!r}")
    return 0


def cmd_grad_check(args):
    del args
    from .gradsuite import run_grad_suite

    reports = run_grad_suite()
    worst = max(reports, key=lambda r: r[1].max_rel_err)
    for name, rep in reports:
        print(f"{name}: max rel err {rep.max_rel_err:.2e} ({'pass' if rep.passed else 'FAIL'})")
    print(f"worst: {worst[0]} {worst[1].max_rel_err:.2e}")
    return 0 if all(rep.passed for _, rep in reports) else 1


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    length, d = args.length, 16
    a = rng.normal(size=(length, length, d))
    b = rng.normal(size=(length, length, d))
    pts = rng.normal(size=(length, 3))
    results = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        kernels.cmm_bt(a, b)  # warm up numba compilation
        kernels.pdist(pts, 1e-8)
        t0 = time.time()
        for _ in range(args.reps):
            kernels.cmm_bt(a, b)
            kernels.cmm_at(a, b)
            kernels.pdist(pts, 1e-8)
        results[backend] = time.time() - t0
    for backend, seconds in results.items():
        print(f"{backend}: {seconds:.4f} s for {args.reps} reps at L={length}")
    print(f"speedup numba vs numpy: {results['numpy'] / max(results['numba'], 1e-12):.2f}x")

    # per-step forward timing across geometric variants
    variants = {
        "plain": geo_arch.BlockConfig(),
        "base": geo_arch.BlockConfig(pair_bias=True),
        "tri-update": geo_arch.BlockConfig(pair_bias=True, triangle_update=True),
        "tri-attn": geo_arch.BlockConfig(pair_bias=True, triangle_attention=True),
    }
    seq = rng.integers(0, 20, size=args.length)
    bits = np.where(rng.random((args.length, 8)) < 0.5, 1.0, -1.0)
    state = dfn.TokenState.observed(seq, bits)
    for name, block_cfg in variants.items():
        model = geo_arch.assemble_model(block_cfg, 1, k=8, seed=0)
        with ad.no_grad():
            model.forward(state)
            t0 = time.time()
            for _ in range(max(args.reps // 4, 1)):
                model.forward(state)
        print(f"forward {name}: {(time.time() - t0) / max(args.reps // 4, 1):.4f} s/step")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="bitfold", description="Token-based protein structure modeling")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        return p

    p = common(sub.add_parser("gen-data", help="generate synthetic backbones"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-len", type=int, default=16)
    p.add_argument("--max-len", type=int, default=48)
    p.add_argument("--chains", type=int, default=1, choices=(0, 1, 2),
                   help="1 or 2 chains; 0 mixes in 20%% two-chain samples")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-tokenizer"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_tokenizer)

    p = common(sub.add_parser("train-lm"))
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_lm)

    p = common(sub.add_parser("finetune-fm"))
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_finetune_fm)

    p = common(sub.add_parser("train-resdiff"))
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_resdiff)

    p = common(sub.add_parser("sample"))
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--length", type=int, default=32)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--strategy", default="confidence", choices=("stochastic", "confidence"))
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("eval"))
    p.add_argument("--mode", required=True, choices=("folding", "diversity"))
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--resdiff", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--steps", type=int, default=25)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("grad-check"))
    p.set_defaults(func=cmd_grad_check)

    p = common(sub.add_parser("bench"))
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--reps", type=int, default=8)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    threads = os.environ.get("BITFOLD_THREADS")
    if threads:
        try:
            import numba

            numba.set_num_threads(max(int(threads), 1))
        except (ImportError, ValueError):
            pass
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BitfoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
