"""The ``surgeon`` command line.

Exit codes: 0 success, 1 usage error, 2 input validation error, 3 I/O error.
Diagnostics go to stderr. With ``--json`` every command writes exactly one
JSON document to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import inject, merge, metrics, packing, quant, sft, surgery, tensorstore, textnorm, tokenizer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; this tool reserves 2 for
    # input validation, so usage problems must exit 1 instead.
    def error(self, message):  # noqa: D102
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False))
    elif text:
        print(text)


def _info(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def _norm_config(args) -> textnorm.NormalizationConfig:
    return textnorm.NormalizationConfig(
        nfkc=args.nfkc, alif_unify=args.alif, tatweel_strip=args.tatweel, ya_unify=args.ya
    )


def _add_norm_flags(parser) -> None:
    parser.add_argument("--no-nfkc", dest="nfkc", action="store_false", help="skip NFKC")
    parser.add_argument("--no-alif", dest="alif", action="store_false", help="skip alif unification")
    parser.add_argument("--no-tatweel", dest="tatweel", action="store_false", help="keep tatweel")
    parser.add_argument("--no-ya", dest="ya", action="store_false", help="keep alif-maqsura")


# -- command handlers ---------------------------------------------------------


def cmd_normalize(args) -> int:
    cfg = _norm_config(args)
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    out = [textnorm.normalize(line, cfg) for line in lines]
    Path(args.output).write_text("\n".join(out) + ("\n" if out else ""), encoding="utf-8")
    _emit(args, {"lines": len(out), "output": str(args.output)}, f"normalized {len(out)} lines")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    model = tokenizer.load_model(args.model)
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    encoded = [model.encode(line) for line in lines]
    if args.json:
        print(json.dumps({"ids": encoded}))
    else:
        for ids in encoded:
            print(" ".join(str(i) for i in ids))
    return EXIT_OK


def cmd_fertility(args) -> int:
    model = tokenizer.load_model(args.model)
    report = tokenizer.fertility(model, Path(args.sample).read_text(encoding="utf-8"))
    payload = {
        "word_count": report.word_count,
        "token_count": report.token_count,
        "fertility": report.fertility,
    }
    _emit(args, payload, report.format())
    return EXIT_OK


def cmd_inject(args) -> int:
    base = tokenizer.load_model(args.base)
    candidates = inject.CandidatePieceList.from_file(args.pieces)
    extended, report = inject.dedup_merge(base, candidates)
    tokenizer.save_model(extended, args.out)
    report.save(args.report)
    _info(args, f"kept {report.net_new} of {report.candidates} candidates")
    _emit(
        args,
        report.to_dict(),
        f"candidates: {report.candidates}\n"
        f"discarded_single_token: {report.discarded_single_token}\n"
        f"discarded_duplicate: {report.discarded_duplicate}\n"
        f"net_new: {report.net_new}\n"
        f"v_old: {report.v_old}\n"
        f"v_new: {report.v_new}",
    )
    return EXIT_OK


def cmd_embed_init(args) -> int:
    store = tensorstore.read_store(args.model)
    base = tokenizer.load_model(args.base_tokenizer)
    report = inject.InjectionReport.load(args.report)
    embed = store[args.embed]
    plan = surgery.SurgeryPlan(
        embed_tensor_name=args.embed,
        head_tensor_name=args.head,
        v_old=report.v_old,
        v_new=report.v_new,
        hidden_dim=embed.shape[1] if len(embed.shape) > 1 else 1,
        unk_id=args.unk,
    )
    resized = surgery.resize_embeddings(store, plan)
    new_tokens = [(entry["id"], entry["content"]) for entry in report.new_tokens]
    initialized = surgery.mean_subtoken_init(resized, plan, base, new_tokens)
    tensorstore.write_store(initialized, args.out)
    tied = surgery.detect_tied(store, plan)
    _emit(
        args,
        {"v_old": plan.v_old, "v_new": plan.v_new, "tied": tied, "output": str(args.out)},
        f"initialized rows [{plan.v_old}, {plan.v_new}) -> {args.out} (tied={tied})",
    )
    return EXIT_OK


def cmd_tensors_ls(args) -> int:
    store = tensorstore.read_store(args.file)
    entries = [
        {"name": name, "dtype": rec.dtype, "shape": list(rec.shape), "bytes": rec.nbytes}
        for name, rec in store.tensors.items()
    ]
    if args.json:
        print(json.dumps(entries))
    else:
        for e in entries:
            shape = "x".join(str(d) for d in e["shape"])
            print(f"{e['name']}\t{e['dtype']}\t{shape}\t{e['bytes']}")
    return EXIT_OK


def cmd_pack_pretrain(args) -> int:
    model = tokenizer.load_model(args.model)
    cfg = _norm_config(args)
    docs = []
    for i, line in enumerate(Path(args.docs).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.docs}:{i + 1}: malformed JSON: {exc}") from exc
        if "text" not in payload:
            raise ValueError(f"{args.docs}:{i + 1}: document object has no 'text' field")
        docs.append(payload["text"])
    stream = packing.pack_corpus(
        docs,
        model,
        cfg,
        args.out,
        created_from=str(args.docs),
        tokenizer_fingerprint=packing.file_fingerprint(args.model),
    )
    _emit(
        args,
        {"token_count": stream.token_count, "eos_id": stream.eos_id, "output": str(args.out)},
        f"packed {stream.token_count} tokens -> {args.out}",
    )
    return EXIT_OK


def cmd_sample_window(args) -> int:
    stream = packing.TokenStream.load(args.stream)
    window = packing.sample_window(stream, args.seed, args.rank, args.step, args.len)
    head = [int(t) for t in window.tokens[:8]]
    tail = [int(t) for t in window.tokens[-8:]]
    payload = {"start": window.start, "cu_seqlens": window.cu_seqlens, "head": head, "tail": tail}
    _emit(
        args,
        payload,
        f"start: {window.start}\n"
        f"cu_seqlens: {window.cu_seqlens}\n"
        f"head: {head}\n"
        f"tail: {tail}",
    )
    return EXIT_OK


def cmd_bench_loader(args) -> int:
    stream = packing.TokenStream.load(args.stream)
    report = packing.bench_loader(stream, args.len, args.windows, seed=args.seed)
    _emit(
        args,
        report,
        f"windows: {report['windows']}\n"
        f"tokens: {report['tokens']}\n"
        f"seconds: {report['seconds']:.3f}\n"
        f"tokens_per_second: {report['tokens_per_second']:.0f}",
    )
    return EXIT_OK


def cmd_pack_sft(args) -> int:
    model = tokenizer.load_model(args.model)
    examples = sft.load_examples_jsonl(args.data)
    kept, dropped = sft.dedup_md5(examples, args.system)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = sft.pack_sft(kept, model, args.system, out_dir / "tokens.bin", out_dir / "labels.bin")
    (out_dir / "mask_report.json").write_text(json.dumps(report.to_dict()), encoding="utf-8")
    _info(args, f"dropped {dropped} duplicate examples")
    payload = dict(report.to_dict(), examples=len(kept), dropped=dropped)
    _emit(
        args,
        payload,
        f"examples: {len(kept)} (dropped {dropped})\n"
        f"total_tokens: {report.total_tokens}\n"
        f"response_tokens: {report.response_tokens}\n"
        f"response_fraction: {report.response_fraction:.4f}",
    )
    return EXIT_OK


def _load_two(args) -> tuple[tensorstore.TensorStore, tensorstore.TensorStore]:
    return tensorstore.read_store(args.a), tensorstore.read_store(args.b)


def cmd_merge_lerp(args) -> int:
    a, b = _load_two(args)
    tensorstore.write_store(merge.lerp(a, b, args.t), args.out)
    _emit(args, {"method": "lerp", "t": args.t, "output": str(args.out)}, f"lerp t={args.t} -> {args.out}")
    return EXIT_OK


def cmd_merge_slerp(args) -> int:
    a, b = _load_two(args)
    tensorstore.write_store(merge.slerp(a, b, args.t), args.out)
    _emit(args, {"method": "slerp", "t": args.t, "output": str(args.out)}, f"slerp t={args.t} -> {args.out}")
    return EXIT_OK


def cmd_merge_soup(args) -> int:
    weights = [float(w) for w in args.weights.split(",")]
    stores = [tensorstore.read_store(p) for p in args.files]
    tensorstore.write_store(merge.soup(stores, weights), args.out)
    _emit(
        args,
        {"method": "soup", "weights": weights, "output": str(args.out)},
        f"soup weights={weights} -> {args.out}",
    )
    return EXIT_OK


def cmd_merge_run(args) -> int:
    recipes = merge.load_recipes(args.recipes)
    manifest = merge.run_recipes(recipes, args.out_dir)
    _emit(
        args,
        {"recipes": manifest, "out_dir": str(args.out_dir)},
        "\n".join(f"{name} -> {fname}" for name, fname in manifest.items()),
    )
    return EXIT_OK


def cmd_masked_ce(args) -> int:
    logprobs = np.fromfile(args.logprobs, dtype="<f8")
    labels = np.fromfile(args.labels, dtype="<i4")
    batch = metrics.MaskedLogProbs(token_logprobs=logprobs.tolist(), labels=labels.tolist())
    loss = metrics.masked_ce(batch)
    ppl = metrics.perplexity(loss)
    _emit(args, {"loss": loss, "perplexity": ppl}, f"loss: {loss:.6f}\nperplexity: {ppl:.4f}")
    return EXIT_OK


def cmd_dpo_loss(args) -> int:
    pairs = []
    for i, line in enumerate(Path(args.pairs).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.pairs}:{i + 1}: malformed JSON: {exc}") from exc
        try:
            pairs.append(
                metrics.PreferencePair(
                    policy_chosen_lp=float(data["policy_chosen_lp"]),
                    policy_rejected_lp=float(data["policy_rejected_lp"]),
                    ref_chosen_lp=float(data["ref_chosen_lp"]),
                    ref_rejected_lp=float(data["ref_rejected_lp"]),
                )
            )
        except KeyError as exc:
            raise ValueError(f"{args.pairs}:{i + 1}: missing field {exc}") from exc
    stats = metrics.dpo_loss(metrics.DpoBatch(pairs=pairs, beta=args.beta))
    payload = {
        "loss": stats.loss,
        "mean_margin": stats.mean_margin,
        "reward_accuracy": stats.reward_accuracy,
    }
    _emit(
        args,
        payload,
        f"loss: {stats.loss:.6f}\n"
        f"mean_margin: {stats.mean_margin:.6g}\n"
        f"reward_accuracy: {stats.reward_accuracy:.4f}",
    )
    return EXIT_OK


def cmd_quant_estimate(args) -> int:
    manifest = quant.load_manifest(args.manifest)
    scheme = quant.QuantScheme.from_json(args.scheme)
    report = quant.estimate(manifest, scheme, per_tensor_overhead_bytes=args.overhead)
    payload = report.to_dict()
    if args.ref_bpw is not None:
        payload["effective_bpw_delta"] = report.effective_bpw - args.ref_bpw
    if args.ref_fallback_count is not None:
        payload["fallback_count_delta"] = report.fallback_tensor_count - args.ref_fallback_count
    text = (
        f"scheme: {report.scheme}\n"
        f"tensors: {len(report.assignments)} ({report.fallback_tensor_count} fallback)\n"
        f"total_params: {report.total_params}\n"
        f"total_bytes: {report.total_bytes:.0f}\n"
        f"effective_bpw: {report.effective_bpw:.4f}"
    )
    if args.ref_bpw is not None:
        text += f"\neffective_bpw_delta: {payload['effective_bpw_delta']:+.4f}"
    if args.ref_fallback_count is not None:
        text += f"\nfallback_count_delta: {payload['fallback_count_delta']:+d}"
    _emit(args, payload, text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="surgeon", description=__doc__)
    parser.add_argument("--json", action="store_true", help="emit one JSON document on stdout")
    parser.add_argument("--quiet", action="store_true", help="suppress informational stderr output")
    parser.add_argument("--seed", type=int, default=0, help="seed for commands that sample")
    parser.add_argument(
        "--threads", type=int, default=1, help="worker cap (processing is currently sequential)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="normalize Arabic text line by line")
    _add_norm_flags(p)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("tokenize", help="encode lines of text to token ids")
    p.add_argument("model")
    p.add_argument("input")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("fertility", help="tokens per word over a sample file")
    p.add_argument("model")
    p.add_argument("sample")
    p.set_defaults(func=cmd_fertility)

    p = sub.add_parser("inject", help="merge candidate pieces into a tokenizer")
    p.add_argument("base")
    p.add_argument("pieces")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("embed-init", help="resize embeddings and mean-initialize new rows")
    p.add_argument("model")
    p.add_argument("base_tokenizer")
    p.add_argument("report")
    p.add_argument("--embed", required=True, help="embedding tensor name")
    p.add_argument("--head", default=None, help="untied head tensor name")
    p.add_argument("--unk", type=int, required=True, help="unk token id for empty decompositions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_init)

    p = sub.add_parser("tensors", help="tensor container utilities")
    tsub = p.add_subparsers(dest="tensors_command", required=True)
    pls = tsub.add_parser("ls", help="list tensors (name, dtype, shape, bytes)")
    pls.add_argument("file")
    pls.set_defaults(func=cmd_tensors_ls)

    p = sub.add_parser("pack-pretrain", help="pack a JSONL corpus into a token stream")
    _add_norm_flags(p)
    p.add_argument("model")
    p.add_argument("docs", help="JSONL with a 'text' field per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack_pretrain)

    p = sub.add_parser("sample-window", help="deterministically sample one training window")
    p.add_argument("stream")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--len", type=int, required=True)
    p.set_defaults(func=cmd_sample_window)

    p = sub.add_parser("bench-loader", help="measure window sampling throughput")
    p.add_argument("stream")
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--windows", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_loader)

    p = sub.add_parser("pack-sft", help="render, dedup and pack instruction data")
    p.add_argument("model")
    p.add_argument("data", help="JSONL with a 'turns' array per line")
    p.add_argument("--system", default=None, help="system prompt for examples without one")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pack_sft)

    p = sub.add_parser("merge", help="checkpoint merging")
    msub = p.add_subparsers(dest="merge_command", required=True)
    for method, handler in (("lerp", cmd_merge_lerp), ("slerp", cmd_merge_slerp)):
        pm = msub.add_parser(method, help=f"{method} two stores")
        pm.add_argument("a")
        pm.add_argument("b")
        pm.add_argument("-t", type=float, required=True)
        pm.add_argument("--out", required=True)
        pm.set_defaults(func=handler)
    pm = msub.add_parser("soup", help="weighted average of two or more stores")
    pm.add_argument("files", nargs="+")
    pm.add_argument("--weights", required=True, help="comma-separated, must sum to 1")
    pm.add_argument("--out", required=True)
    pm.set_defaults(func=cmd_merge_soup)
    pm = msub.add_parser("run", help="execute a recipe file")
    pm.add_argument("recipes")
    pm.add_argument("--out-dir", required=True)
    pm.set_defaults(func=cmd_merge_run)

    p = sub.add_parser("masked-ce", help="masked cross-entropy from binary logprob/label files")
    p.add_argument("logprobs", help="little-endian float64 file")
    p.add_argument("labels", help="little-endian int32 file")
    p.set_defaults(func=cmd_masked_ce)

    p = sub.add_parser("dpo-loss", help="preference loss over a JSONL pair file")
    p.add_argument("pairs")
    p.add_argument("--beta", type=float, default=0.1)
    p.set_defaults(func=cmd_dpo_loss)

    p = sub.add_parser("quant-estimate", help="static quantization footprint from a manifest")
    p.add_argument("manifest")
    p.add_argument("--scheme", required=True, help="quantization scheme JSON")
    p.add_argument("--overhead", type=int, default=0, help="per-tensor metadata bytes")
    p.add_argument("--ref-bpw", type=float, default=None, help="reference effective bpw for delta")
    p.add_argument(
        "--ref-fallback-count", type=int, default=None, help="reference fallback count for delta"
    )
    p.set_defaults(func=cmd_quant_estimate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"surgeon: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"surgeon: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
