"""Command line front end.

Exit codes: 0 success, 2 verification failure, 3 configuration or usage
error, 4 unexpected failure.  Logs go to stderr; machine-readable results
go to stdout or the requested output files.
"""

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace

from .block_routing import routing_overlap_report
from .errors import ConfigurationError, LsrmError, VerificationError
from .nsa_attention import nsa_cross_attention
from .runner import RunConfig, config_from_json, load_json_file, run_scene
from .tensor_core import affine, layer_norm
from .verify import SUITES, compare_goldens, run_suite

log = logging.getLogger("lsrm")


class _Parser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting so main() owns the code."""

    def error(self, message):
        raise ConfigurationError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lsrm",
                     description="sparse-attention reconstruction runner")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the two-stage pipeline")
    run_p.add_argument("--scene", required=True, help="scene JSON path")
    run_p.add_argument("--config", help="config JSON path (defaults apply)")
    run_p.add_argument("--out", default="out", help="artifact directory")
    run_p.add_argument("--workers", type=int, help="override worker count")
    run_p.add_argument("--routing", choices=("3d", "score"),
                       help="override routing mode")
    run_p.add_argument("--seed", type=int, help="override seed")
    run_p.add_argument("--dry-run", action="store_true",
                       help="print token counts without running the model")
    run_p.set_defaults(fn=_cmd_run)

    ver_p = sub.add_parser("verify", help="run self-verification suites")
    ver_p.add_argument("--suite", default="all",
                       choices=SUITES + ("all",))
    ver_p.add_argument("--seed", type=int, default=0)
    ver_p.add_argument("--out", help="write the JSON report here")
    ver_p.add_argument("--golden", nargs=2, metavar=("REF", "CAND"),
                       help="compare two golden files instead of running "
                            "suites")
    ver_p.set_defaults(fn=_cmd_verify)

    cmp_p = sub.add_parser("compare-routing",
                           help="geometry routing vs score-derived "
                                "selection overlap")
    cmp_p.add_argument("--scene", required=True)
    cmp_p.add_argument("--config")
    cmp_p.add_argument("--seed", type=int, help="override seed")
    cmp_p.add_argument("--out", help="write the JSON report here")
    cmp_p.set_defaults(fn=_cmd_compare_routing)
    return parser


def _load_config(args) -> RunConfig:
    cfg = (config_from_json(load_json_file(args.config)) if args.config
           else RunConfig())
    overrides = {}
    for name in ("workers", "routing", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def _emit(doc: dict, out_path) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
        log.info("wrote %s", out_path)
    else:
        sys.stdout.write(text)


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    scene_doc = load_json_file(args.scene)
    if args.dry_run:
        _emit(run_scene(cfg, scene_doc, dry_run=True), None)
        return 0
    summary = run_scene(cfg, scene_doc, args.out)
    log.info("artifacts in %s", args.out)
    _emit(summary, None)
    return 0


def _cmd_verify(args) -> int:
    if args.golden:
        report = compare_goldens(args.golden[0], args.golden[1])
        _emit(report, args.out)
        return 0 if report["passed"] else 2
    result = run_suite(args.suite, args.seed)
    _emit(result, args.out)
    if not result["passed"]:
        failed = [c["check"] for c in result["checks"] if not c["passed"]]
        log.error("failed checks: %s", ", ".join(failed))
        return 2
    return 0


def _score_selections_layer0(result) -> dict:
    """Selections the score-based mode would pick at the first sparse
    layer, for overlap against the geometric plan."""
    cfg = result["cfg"]
    params = cfg.attention_params()
    blk = result["weights"].sparse_stage[0]
    x_up, y_up = result["x_up"], result["y_up"]
    part_vol, part_img = result["part_vol"], result["part_img"]
    # layer 0 enters with zero state, so the pre-norm input is the
    # injection alone
    xe = affine(x_up.features, blk.inj_x)
    ye = affine(y_up.features, blk.inj_y)
    x_hat = layer_norm(xe, blk.ln_attn_x.gamma, blk.ln_attn_x.beta)
    y_hat = layer_norm(ye, blk.ln_attn_y.gamma, blk.ln_attn_y.beta)
    b = cfg.budgets
    uses = {
        "v2v": (x_hat, x_hat, part_vol, part_vol, blk.nsa_x_self, b.b_v2v),
        "v2i": (x_hat, y_hat, part_vol, part_img, blk.nsa_x_cross,
                b.b_v2i),
        "i2v": (y_hat, x_hat, part_img, part_vol, blk.nsa_y_cross,
                b.b_i2v),
        "i2i": (y_hat, y_hat, part_img, part_img, blk.nsa_y_self, b.b_i2i),
    }
    sels = {}
    for name, (q_h, kv_h, pq, pkv, w_use, budget) in uses.items():
        _, sel = nsa_cross_attention(q_h, kv_h, pq, pkv, None, w_use,
                                     params, b_sel=budget,
                                     return_selection=True)
        sels[name] = sel
    return sels


def _cmd_compare_routing(args) -> int:
    cfg = replace(_load_config(args), routing="3d")
    scene_doc = load_json_file(args.scene)
    result = run_scene(cfg, scene_doc)
    report = routing_overlap_report(result["plan"],
                                    _score_selections_layer0(result))
    doc = {}
    for name, entry in report.items():
        pq = entry["per_query"]
        doc[name] = {
            "mean_jaccard": entry["mean"],
            "min_jaccard": float(pq.min()) if pq.size else 1.0,
            "max_jaccard": float(pq.max()) if pq.size else 1.0,
            "frac_disjoint": float((pq == 0.0).mean()) if pq.size else 0.0,
            "queries": int(pq.size),
        }
    _emit(doc, args.out)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except VerificationError as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return 2
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 3
    except LsrmError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception:
        traceback.print_exc()
        return 4


if __name__ == "__main__":
    sys.exit(main())
