"""Summarise confusion scores and misclassified samples for a saved phase.

Loads a phase checkpoint written by ``create-cil run``, evaluates it on the
test classes seen so far and prints the confusion-score quartiles plus the
misclassified samples with the smallest error margins.

    python scripts/confusion_report.py configs/synthetic_ablation.cfg out/checkpoints/phase_6.ckpt
"""
from __future__ import annotations

import argparse

import numpy as np

from create_cil.config import build_data, load_config
from create_cil.datasets import LabeledDataset
from create_cil.evaluation import AEClassifier, confusion_stats, misclassified_error_report, phase_accuracy
from create_cil.trainer import classifier_for, load_checkpoint


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("checkpoint")
    parser.add_argument("--show", type=int, default=10, help="misclassified samples to list")
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    state, _, meta = load_checkpoint(args.checkpoint)
    test = build_data(cfg.dataset).test
    order = np.asarray(meta["class_order"])
    seen = state.seen_classes
    lookup = np.full(order.max() + 1, -1)
    lookup[order[:seen]] = np.arange(seen)
    keep = np.flatnonzero(lookup[test.labels] >= 0)
    ds = LabeledDataset(test.samples[keep], lookup[test.labels[keep]], seen, "test")

    model = classifier_for(state, meta.get("alpha", 0.1))
    print(f"phase {state.phase}: {seen} classes, accuracy {phase_accuracy(model, ds):.2f}")
    if not isinstance(model, AEClassifier):
        print("checkpoint has no auto-encoder head; confusion scores need reconstruction errors")
        return
    s = confusion_stats(model, ds, model.alpha)
    print(f"confusion min {s.min:.3f} q1 {s.q1:.3f} median {s.median:.3f} q3 {s.q3:.3f} max {s.max:.3f} mean {s.mean:.3f}")
    report = sorted(misclassified_error_report(model, ds), key=lambda r: r.margin)
    print(f"{len(report)} misclassified; closest calls:")
    for r in report[: args.show]:
        print(f"  sample {r.index}: true {r.true_class} predicted {r.predicted_class} margin {r.margin:.4f}")


if __name__ == "__main__":
    main()
