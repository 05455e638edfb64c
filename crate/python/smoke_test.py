"""Exercises the halprobe extension end to end on a planted fixture."""

import math
import sys
import tempfile
from pathlib import Path

import halprobe as hp


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        actv, manifest_path = hp.planted_fixture(
            tmp, records=600, hidden_dim=16, signal_dims=4, shift=1.5, layers=[(0, False), (2, True)]
        )

        manifest = hp.Manifest.read(manifest_path)
        counts = manifest.label("per_task")
        labeled = sum(c["labeled_0"] + c["labeled_1"] for c in counts.values())
        check(len(manifest) == 600 and labeled > 0, f"labeled {labeled} of {len(manifest)} entries")
        rates = manifest.hallucination_rates()
        check(all(0.0 <= r <= 1.0 for r in rates.values()), f"rates {rates}")
        labeled_path = tmp / "labeled.jsonl"
        manifest.write(labeled_path)

        records = hp.read_activations(actv)
        check(len(records) == 1200 and len(records[0].hidden) == 16, "read 1200 activation records")
        copy = tmp / "copy.actv"
        size = hp.write_activations(copy, records, 16)
        check(copy.read_bytes() == actv.read_bytes() and size == actv.stat().st_size, "actv rewrite is identical")

        view = hp.DatasetView.load(actv, labeled_path, ["layer=2"]).labeled()
        check(view.layers() == [2] and view.hidden_dim == 16, repr(view))
        check(sorted(set(view.labels())) == [0, 1], "labels are ints")
        train, val, test = view.split(seed=7)
        check(len(train) + len(val) + len(test) == len(view), "split covers the view")

        probe, history = hp.train(train, val=val, hidden_dim=32, epochs=20, batch_size=32, lr=1e-3)
        check(len(history) == 20 and history[-1]["train_loss"] < history[0]["train_loss"], "training loss fell")
        report = hp.evaluate(probe, test)
        check(report["accuracy"] >= 0.9, f"test accuracy {report['accuracy']:.3f}")

        path = tmp / "probe.bin"
        probe.save(path)
        again = hp.Probe.load(path)
        x = test.features()
        classes = probe.predict(x)
        check(again.predict(x) == classes and set(classes) <= {0, 1}, "saved probe predicts identically")
        check(probe.parameter_count == 2 * 32 * 16 + 2 * 32, f"parameter count {probe.parameter_count}")
        check(probe.mode == "cls" and probe.output_dim == 2, "classification probe shape")

        reg, _ = hp.train(train, target_metric="rouge_l", target_form="rank", hidden_dim=16, epochs=5, lr=1e-3)
        rep = hp.evaluate(reg, test, target_metric="rouge_l", target_form="rank", fit_on=train)
        check(reg.mode == "reg" and math.isfinite(rep["rmse"]), f"regression rmse {rep['rmse']:.3f}")

        ranked = hp.rank_neurons(view)
        check(set(ranked["ranking"][:4]) == {0, 1, 2, 3}, f"top neurons {ranked['ranking'][:4]}")

        try:
            hp.Probe.load(actv)
        except hp.FormatError as e:
            check(True, f"format error raised: {e}")
        else:
            check(False, "loading an activation file as a probe should fail")

    score = hp.rouge_l("the cat sat on the mat", "the cat is on the mat")
    check(abs(score["f1"] - 5 / 6) < 1e-12, f"rouge-l f1 {score['f1']:.4f}")

    mi = hp.mutual_information([float(i % 2) for i in range(200)], [i % 2 for i in range(200)])
    check(abs(mi - math.log(2)) < 0.05, f"mi of a copied label {mi:.4f}")

    model = hp.fit_ppl_threshold([1.0, 2.0, 8.0, 9.0], [1, 1, 0, 0])
    check(hp.apply_ppl_threshold(model, [1.5, 8.5]) == [1, 0], f"ppl threshold {model['threshold']}")

    html = hp.render_heatmap([{"record_id": 1, "tokens": ["a", "<b>"], "scores": [0.0, 1.0]}])
    check("&lt;b&gt;" in html and "rgba(220, 38, 38, 1.000)" in html, "heatmap escapes and scales")

    print("smoke test passed")


if __name__ == "__main__":
    main()
