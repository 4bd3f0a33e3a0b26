"""Standalone figure renderer: a run directory plus a JSON manifest in,
vector figures out.

The manifest lists figure requests; input CSV paths are resolved relative
to the run directory, outputs land under a figures/ subtree (never inside
the run directory itself):

    {"figures": [
        {"name": "calibration", "kind": "reliability_diagram",
         "inputs": ["seed0/reliability_comod_test.csv"]},
        {"name": "curves", "kind": "learning_curve",
         "inputs": ["runs/comod/metrics_finetune.csv",
                    "runs/attn/metrics_finetune.csv"],
         "labels": ["comodulation", "attention"],
         "options": {"metric": "macro_f1", "split": "val"}}
    ]}
"""

import argparse
import json
import sys
from pathlib import Path

from .figures import FigureError, FigureRequest, FIGURE_KINDS, render


def load_manifest(path):
    """Parse a manifest file into a list of request dicts."""
    path = Path(path)
    if not path.exists():
        raise FigureError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FigureError(f"manifest is not valid JSON: {exc}") from exc
    figures = doc.get("figures") if isinstance(doc, dict) else None
    if not isinstance(figures, list) or not figures:
        raise FigureError('manifest must contain a non-empty "figures" list')
    for i, entry in enumerate(figures):
        if not isinstance(entry, dict) or "kind" not in entry \
                or "inputs" not in entry:
            raise FigureError(
                f'manifest entry {i} needs at least "kind" and "inputs"')
    return figures


def build_requests(figures, run_dir, out_dir, fmt):
    """Turn manifest entries into concrete figure requests."""
    requests = []
    for i, entry in enumerate(figures):
        name = entry.get("name", f"figure{i}")
        inputs = tuple(str(run_dir / p) for p in entry["inputs"])
        out = out_dir / f"{name}.{fmt}"
        requests.append(FigureRequest(kind=entry["kind"], inputs=inputs,
                                      output=str(out),
                                      labels=tuple(entry.get("labels", ())),
                                      options=dict(entry.get("options", {}))))
    return requests


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plotkit",
        description="Render figures from experiment-run CSVs per a JSON "
                    "manifest. Presentation only; statistics are taken "
                    "as-is from the CSVs.")
    parser.add_argument("run_dir", help="directory the manifest's CSV paths "
                                        "are relative to")
    parser.add_argument("--manifest", required=True,
                        help="JSON manifest listing the figures to render")
    parser.add_argument("--out", default="figures",
                        help="output directory (default: ./figures)")
    parser.add_argument("--format", default="svg", choices=("svg", "pdf"),
                        help="vector output format (default: svg)")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    run_dir = Path(args.run_dir)
    out_dir = Path(args.out)
    if run_dir.resolve() in (out_dir.resolve(), *out_dir.resolve().parents):
        print("plotkit: refusing to write figures inside the run directory; "
              "pass --out pointing elsewhere", file=sys.stderr)
        return 1
    try:
        figures = load_manifest(args.manifest)
        requests = build_requests(figures, run_dir, out_dir, args.format)
    except FigureError as exc:
        print(f"plotkit: {exc}", file=sys.stderr)
        return 1

    failures = 0
    for request in requests:
        try:
            out = render(request)
            if not args.quiet:
                print(f"wrote {out}")
        except FigureError as exc:
            failures += 1
            print(f"plotkit: {request.kind} -> {request.output}: {exc}",
                  file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
