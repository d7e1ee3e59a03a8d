"""Per-round F-measure of one EM experiment on synthetic scenes.

    python3 scripts/em_curve.py coarse --seeds 0 1 2 --frac 0.1
"""

import argparse
import json
import time

from polyem.em_engine import EmConfig, run_em
from polyem.scene_synth import split_dataset, synth_dataset, truth_by_id


def curve(kind, seed, frac, n_train, n_eval, S, H, weighted=True):
    train = synth_dataset(n_train, seed)
    ev = synth_dataset(n_eval, 10_000 + seed)
    strong, weak = split_dataset(train, frac, seed, kind)
    cfg = EmConfig(confidence_threshold=S, iou_threshold=H, rng_seed=seed, use_confidence=weighted)
    t0 = time.perf_counter()

    def show(r):
        pq = "" if r.pseudo_precision is None else f"  pseudo P {r.pseudo_precision:.3f} R {r.pseudo_recall:.3f}"
        print(f"{kind} seed {seed} round {r.round}: F {r.eval_F:.3f} (P {r.eval_P:.3f} R {r.eval_R:.3f})"
              f"  n_pseudo {r.n_pseudo}{pq}  {time.perf_counter() - t0:.0f}s", flush=True)

    res = run_em(strong, weak, kind, cfg, eval_records=ev, truth=truth_by_id(train), progress=show)
    return [r.to_json() for r in res.reports]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=["tight", "loose", "coarse", "tag"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--frac", type=float, default=0.1, help="strongly labelled fraction")
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-eval", type=int, default=300)
    ap.add_argument("-S", type=float, default=0.3, help="confidence threshold")
    ap.add_argument("-H", type=float, default=0.3, help="coarse-box IoU threshold")
    ap.add_argument("--unweighted", action="store_true", help="force every pseudo confidence to 1")
    ap.add_argument("-o", "--output", help="write all reports as JSON")
    a = ap.parse_args()
    out = {
        str(s): curve(a.kind, s, a.frac, a.n_train, a.n_eval, a.S, a.H, not a.unweighted) for s in a.seeds
    }
    if a.output:
        with open(a.output, "w") as f:
            json.dump(out, f, indent=2)


if __name__ == "__main__":
    main()
