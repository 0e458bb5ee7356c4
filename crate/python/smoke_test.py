"""Smoke test for the mmdenoise extension module.

Build first, either with `maturin develop -m crates/py/Cargo.toml` or with
`cargo build --release -p mmdenoise-py --features extension-module`; in the
latter case the shared library is picked up from target/release.
"""

import importlib
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        return importlib.import_module("mmdenoise")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libmmdenoise_py.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "mmdenoise.so"))
            sys.path.insert(0, tmp)
            return importlib.import_module("mmdenoise")
    raise SystemExit("mmdenoise extension not found; build crates/py first")


def main():
    md = load()
    xs, y = md.generate_synthetic(n=200, seed=3)
    assert len(xs) == 2 and len(xs[0]) == 200 and len(xs[0][0]) == 20 and len(xs[1][0]) == 30
    assert sorted(set(y)) == [0, 1, 2, 3]

    noisy, idx = md.inject_noise(xs, y, epsilon=1.0, eta=0.1, seed=1)
    assert len(idx) == 20
    assert noisy[0][0] != xs[0][0]

    train = [m[:140] for m in xs]
    test = [m[140:] for m in xs]
    model = md.Model([20, 30], 4, seed=0, latent_dim=8, hidden_dim=16)
    history = model.fit(train, y[:140], epochs=30)
    assert len(history) == 30
    assert history[-1]["l_cls"] < history[0]["l_cls"]

    pred = model.predict(test, iterations=5)
    report = md.evaluate(pred, y[140:], 4)
    assert 0.0 <= report["accuracy"] <= 1.0
    assert sum(map(sum, report["confusion"])) == 60

    trace = model.trace(test, iterations=5)
    assert len(trace) == 6

    path = os.path.join(tempfile.mkdtemp(), "model.ckpt")
    model.save(path)
    again = md.Model.load(path)
    assert again.predict(test, iterations=5) == pred

    try:
        md.Model([20, 30], 4, ablation="bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("bad ablation accepted")

    print("accuracy %.3f after 30 epochs; smoke test ok" % report["accuracy"])


if __name__ == "__main__":
    main()
