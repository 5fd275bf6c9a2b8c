"""Smoke test for the compiled `nlctf` module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`.
"""

import math

import nlctf


def main():
    t = nlctf.Tensor3([3, 4, 2], [float(i) for i in range(24)])
    assert t.dims == [3, 4, 2]
    rows, cols, data = t.unfold(1)
    assert (rows, cols) == (3, 8)
    back = nlctf.fold(rows, cols, data, 1, [3, 4, 2])
    assert back.data() == t.data()

    core, factors = nlctf.hosvd(t)
    assert len(factors) == 3
    assert abs(core.frobenius_norm() - t.frobenius_norm()) < 1e-9

    assert nlctf.logsum_prox(0.0, 0.5, 1e-2) == 0.0
    assert 0.0 < nlctf.logsum_prox(3.0, 0.5, 1e-2) < 3.0

    cfg = nlctf.RunConfig("desk", ["geometry.n_views=40", "recon.outer_iters=3"])
    truth = cfg.phantom()
    assert truth.dims == [128, 128, cfg.n_bins]
    sinos = cfg.simulate(truth, noise=False)
    recon = cfg.sart(sinos)
    err = nlctf.rmse(recon, truth)
    assert len(err) == cfg.n_bins and all(math.isfinite(e) for e in err)
    print("rmse after 3 SART sweeps:", [round(e, 4) for e in err])
    print("ok")


if __name__ == "__main__":
    main()
