"""Smoke test for the infinet_py extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/infinet-*.whl
"""

import json
import os
import tempfile

import infinet_py as inf


def main():
    vol = inf.generate_phantom(7, dims=(16, 16, 16))
    assert vol.dims == (16, 16, 16)
    assert len(vol.labels()) == 16 ** 3
    assert set(vol.labels()) == {0, 1, 2, 3}

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "p.ivol")
        vol.save(path)
        again = inf.Volume.load(path)
        assert again.t1() == vol.t1() and again.labels() == vol.labels()

        try:
            inf.generate_phantom(1, dims=(30, 30, 30))
        except ValueError as e:
            assert "multiples of 8" in str(e)
        else:
            raise AssertionError("30^3 phantom accepted")

        default = inf.Model()
        assert default.count_parameters()[0] == 508292, default.count_parameters()

        # Worked example: weights 4/4, N = 5.6, D = 16.
        loss = inf.gdl_loss([0.8, 0.4, 0.2, 0.6], [1, 0, 0, 1], [4.0, 4.0], (1, 2, 1, 2))
        assert abs(loss - 0.3) < 1e-9, loss

        passed, err, checked = inf.grad_check("conv2d", trials=1)
        assert passed and err < 1e-4 and checked > 0

        models = []
        for i, axis in enumerate(["axial", "coronal", "sagittal"]):
            ckpt = os.path.join(d, axis + ".ckpt")
            model, report = inf.train([vol], view=axis, max_epochs=2, seed=i, base_channels=4, checkpoint=ckpt)
            report = json.loads(report)
            assert len(report["epoch_losses"]) == 2
            assert model.view == axis
            models.append(inf.Model.load(ckpt))

        probs = [inf.segment(m, vol, m.view) for m in models]
        agg = inf.aggregate(probs)
        assert agg.max_normalization_error() < 1e-5
        labels = agg.argmax()
        assert len(labels) == 16 ** 3

        perfect = inf.dice(vol.labels(), vol.labels())
        assert perfect["mean_dice"] == 1.0
        scores = inf.dice(labels, vol.labels())
        assert 0.0 <= scores["mean_dice"] <= 1.0

        t1, t2, lab, h, w = vol.slice("axial", 3)
        out = models[0].predict(t1, t2, 1, h, w)
        assert len(out) == 4 * h * w

    print("python smoke test ok: mean dice after 2 epochs %.3f" % scores["mean_dice"])


if __name__ == "__main__":
    main()
