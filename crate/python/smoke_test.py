"""Smoke test for the cabm_py extension module."""

import math
import os
import random

import cabm_py as cb


def main():
    assert cb.quantize(0.26, 1.0, 4) == cb.quantize(cb.quantize(0.26, 1.0, 4), 1.0, 4)

    cfg = cb.BitConfig([4, 6, 8, 8])
    assert cfg.fab() == 6.5 and str(cb.BitConfig.parse("4,6,8,8")) == str(cfg)

    records = [
        (0.0, [4, 4], 32.0),
        (0.02, [4, 8], 48.0),
        (0.02, [6, 4], 40.0),
        (0.05, [8, 8], 64.0),
        (0.07, [6, 6], 48.0),
    ]
    table = cb.Lut.build(records, strategy="S1", de=10)
    assert table.num_subintervals == 15 and table.layers == 2
    assert table.lookup(0.02).bits == [6, 4]
    again = cb.Lut.parse(table.to_text())
    assert again.to_text() == table.to_text()

    net = cb.Supernet(num_blocks=1, channels=4, scale=2, seed=1)
    rng = random.Random(0)
    h, w = 10, 14
    lr = cb.Tensor([1, 3, h, w], [rng.random() for _ in range(3 * h * w)])
    e = cb.edge_score(lr)
    assert e.value >= 0.0
    out = net.forward(lr, cb.BitConfig([8, 8]))
    assert out.shape == [1, 3, 2 * h, 2 * w]
    total, fab = net.bitops(cb.BitConfig([8, 8]), h, w)
    assert total > 0 and fab == 8.0

    sr, summary = cb.run_sr(lr, net, table, patch_size=6)
    assert sr.shape == [1, 3, 2 * h, 2 * w]
    assert summary["psnr"] is None and len(summary["patches"]) == 6
    assert cb.psnr(sr, sr) == 99.0 and math.isclose(cb.ssim(sr, sr), 1.0)

    try:
        cb.Lut.parse("not a table")
    except ValueError:
        pass
    else:
        raise AssertionError("bad table accepted")

    print("cabm_py smoke test OK", os.path.basename(cb.__file__))


if __name__ == "__main__":
    main()
