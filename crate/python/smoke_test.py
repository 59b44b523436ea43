"""Smoke test for the satnet Python module.

Build and install first:  pip install ./crates/py --no-build-isolation
"""
import math
import os
import tempfile

import satnet


def main():
    ds = satnet.Dataset.synthetic(10, seed=1)
    assert len(ds) == 40 and ds.class_names == ["diagonal", "green", "horizontal", "red"]
    train, val, test = satnet.split_labels(ds.labels, 4, seed=42)
    assert sorted(train + val + test) == list(range(40))
    assert (len(train), len(val), len(test)) == (32, 4, 4)

    model = satnet.Model("balanced12", 4, seed=0, channels=[8, 16, 32, 64])
    assert model.fusion_weights() == [0.5] * 11
    history = satnet.train(model, ds, train, val, seed=0, epochs=2, batch_size=8)
    assert [h["epoch"] for h in history] == [1, 2]
    assert all(math.isfinite(h["train_loss"]) for h in history)
    assert len(history[-1]["alpha_per_block"]) == 11

    report = satnet.evaluate(model, ds, test)
    assert report["num_samples"] == len(test)
    assert len(report["confusion_matrix"]) == 4
    assert "kappa" in report and "mcc" in report
    print(satnet.render_report(report))

    pixels = [v for i in test[:2] for v in ds.image(i)]
    logits = model.predict(pixels, 2)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.bin")
        model.save(path)
        again = satnet.Model.load(path)
        assert again.predict(pixels, 2) == logits
        assert again.spec_text == model.spec_text

    cm = [[45, 5], [5, 45]]
    assert abs(satnet.kappa(cm) - 0.8) < 1e-12
    assert satnet.mcc([[3, 0], [0, 0]]) is None
    assert satnet.confusion_matrix([0, 1, 1], [0, 1, 0], 2) == [[1, 1], [0, 1]]
    assert satnet.per_class_metrics(cm)["macro_f1"] == 0.9
    assert satnet.learning_rate("warm_restarts(15, 2)", 1e-3, 15) == 1e-3

    for bad in (lambda: satnet.Model("vgg", 10), lambda: satnet.learning_rate("cosine(0)", 1e-3, 0)):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    baseline = satnet.Model("baseline", 10)
    print(f"baseline parameters: {baseline.num_parameters}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
