"""Rebuild ``src/fjsp_rl/data/taillard.json`` from the job_shop_lib wheel.

job_shop_lib (MIT licensed) ships the Taillard instances ta01-ta80 together
with their best known bounds. Only the ``ta*`` entries are kept.

    pip download --no-deps job-shop-lib==1.7.2 -d /tmp/jsl
    python scripts/extract_taillard.py /tmp/jsl/job_shop_lib-1.7.2-py3-none-any.whl
"""
import argparse
import json
import zipfile
from pathlib import Path

MEMBER = "job_shop_lib/benchmarking/benchmark_instances.json"
OUT = Path(__file__).resolve().parents[1] / "src" / "fjsp_rl" / "data" / "taillard.json"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("wheel", type=Path)
    parser.add_argument("--out", type=Path, default=OUT)
    args = parser.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        raw = json.loads(zf.read(MEMBER))

    out = {
        "source": "job_shop_lib 1.7.2 benchmark_instances.json (MIT)",
        "reference": raw["ta01"]["metadata"]["reference"],
        "machines_indexing": 0,
        "instances": {},
    }
    for name in sorted(k for k in raw if k.startswith("ta")):
        entry = raw[name]
        meta = entry["metadata"]
        out["instances"][name] = {
            "durations": entry["duration_matrix"],
            "machines": entry["machines_matrix"],
            "upper_bound": meta.get("upper_bound"),
            "lower_bound": meta.get("lower_bound"),
        }
    args.out.write_text(json.dumps(out, separators=(",", ":")) + "\n")
    print(f"wrote {len(out['instances'])} instances to {args.out}")


if __name__ == "__main__":
    main()
