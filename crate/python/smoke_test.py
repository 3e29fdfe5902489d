"""Smoke test for the `lemb` extension module.

Build first with `cargo build -p lemb-py --release`, then run
`python3 python/smoke_test.py`. The script finds liblemb.so under target/
unless LEMB_SO points at a specific file.
"""

import importlib.machinery
import importlib.util
import math
import os
import pathlib
import random
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [os.environ.get("LEMB_SO")] if os.environ.get("LEMB_SO") else [
        ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("liblemb.so", "liblemb.dylib", "lemb.pyd")
    ]
    for path in candidates:
        if path and pathlib.Path(path).exists():
            loader = importlib.machinery.ExtensionFileLoader("lemb", str(path))
            spec = importlib.util.spec_from_file_location("lemb", str(path), loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("liblemb not found; run `cargo build -p lemb-py` first")


def main():
    lemb = load_module()
    rng = random.Random(7)

    rows = {lemb.hash_to_row(i, 97) for i in range(2000)}
    assert rows <= set(range(97)) and len(rows) == 97
    assert lemb.hash_to_row(12345, 97) == lemb.hash_to_row(12345, 97)
    assert abs(lemb.expected_collision_fraction(1, 100)) < 1e-12

    assert lemb.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert lemb.roc_auc([0.5, 0.5], [0, 1]) == 0.5
    assert abs(lemb.transe_score([1.0, 0.0], [0.0, 1.0], [1.0, 1.0])) < 1e-12
    loss, ga, gp, gn = lemb.infonce_loss([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], 1.0)
    assert abs(loss - math.log(1 + math.exp(-1))) < 1e-12 and len(gn) == 1
    assert abs(lemb.combine_utility(0.5, 0.2, 0.05) - 0.15) < 1e-12

    n, dim = 256, 64
    data = [rng.gauss(0.0, 1.0) for _ in range(n * dim)]
    table = lemb.EmbeddingTable("user", "v1", n, dim, data)
    ids = [rng.getrandbits(64) for _ in range(500)]
    emb, collided = table.lookup(ids)
    assert len(emb) == 500 and len(emb[0]) == dim and len(collided) == 500

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "user.pemb")
        table.save(path)
        again = lemb.EmbeddingTable.load(path)
        assert again.lookup(ids)[0] == emb and again.version_id == "v1"

    q = table.quantize(64)
    assert q.dtype == "int4q"
    qbytes, ratio = lemb.size_report(q)
    assert qbytes == q.payload_bytes and 0.28 <= ratio <= 0.32, ratio

    for strategy in ("contiguous", "modulo"):
        plan = lemb.plan_shards(n, dim, dim * 4, n * dim * 4 // 8, strategy)
        assert plan.num_shards == 8
        assert table.sharded_lookup(plan, ids) == emb

    try:
        lemb.combine_utility(1.5, 0.0, 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range probability accepted")

    print("lemb smoke test: ok")


if __name__ == "__main__":
    main()
