"""Smoke test for the missformer_py extension.

Build with `maturin develop -m crates/py/Cargo.toml`, or copy
target/release/libmissformer_py.so to missformer_py.so on PYTHONPATH.
"""

import math
import os
import tempfile

import missformer_py as mf


def main():
    corpus = mf.generate("object", 40, seed=3, lengths=(10, 14))
    assert len(corpus) == 40
    assert all(10 <= len(t) <= 14 for t in corpus)

    obs = mf.corrupt(corpus[0], noise_std=0.0, missing_prob=0.3, seed=1)
    assert len(obs.values) == len(corpus[0])
    for v, m, p in zip(obs.values, obs.missing, corpus[0].positions):
        if m:
            assert v == [0.0, 0.0]
        else:
            assert v == p

    line = mf.Trajectory([[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]], dt=0.5)
    clean = mf.corrupt(line)
    fit = mf.linear_baseline(clean, horizon=2)
    assert len(fit) == 6
    assert abs(fit[5][0] - 5.0) < 1e-9 and abs(fit[5][1] - 10.0) < 1e-9
    assert mf.ade(fit[:4], line.positions) < 1e-9

    offsets = clean.to_offsets()
    assert offsets.mode == "offsets"
    assert offsets.values[1] == [1.0, 2.0]

    masked = clean.mask_tail(2)
    assert masked.missing == [False, False, True, True]

    sin, sout = mf.suggest_scales(corpus)
    model = mf.Model(d_model=16, input_scale=sin, output_scale=sout, seed=0)
    assert model.num_params > 0
    losses = model.train(corpus, epochs=5, missing_prob=0.1, lr=3e-3, batch_size=8)
    assert len(losses) == 5 and all(math.isfinite(l) for l in losses)

    est = model.predict(obs, horizon=3)
    assert len(est) == len(obs) + 3

    attn = model.attention(obs)
    for row in attn[0][0]:
        assert abs(sum(row) - 1.0) < 1e-9

    task, n, ade, ade_std, fde = model.evaluate(corpus[:10], missing_prob=0.1, seed=5)
    assert task == "reconstruction" and n == 10 and ade >= 0 and ade_std >= 0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = mf.Model.load(path)
        assert again.predict(obs) == model.predict(obs)

    try:
        mf.Model(d_model=0)
    except ValueError:
        pass
    else:
        raise AssertionError("d_model=0 accepted")

    print("smoke test ok: final loss %.4f, ade %.3f" % (losses[-1], ade))


if __name__ == "__main__":
    main()
