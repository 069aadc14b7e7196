"""Regenerate the small test fixtures under tests/data.

The annotated images, the one-image IDX pair and the golden forward pass
are produced with plain numpy and hand-packed bytes, independently of the
package, so tests can use them as oracles.  The golden checkpoint is a
frozen reference training run made with the package itself.

    python scripts/make_fixtures.py tests/data
"""
import argparse
import gzip
import struct
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# files written by hand


def pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes()


def annotated(out: Path, n=10, size=48, seed=11):
    """n images with a bright disk (lesion) and a 16x20 normal rectangle."""
    rng = np.random.default_rng(seed)
    out.mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[:size, :size]
    for k in range(n):
        level = rng.uniform(80, 140)
        img = level + rng.normal(0, 8, (size, size))
        r = rng.uniform(9, 11)
        cy, cx = rng.uniform(r + 1, size / 2, size=2)
        lesion = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[lesion] += rng.uniform(50, 80)
        normal = np.zeros((size, size), dtype=bool)
        r0, c0 = rng.integers(size - 22, size - 16 + 1, size=2)
        normal[r0:r0 + 16, c0:c0 + 20] = True
        normal &= ~lesion
        stem = f"case{k:02d}"
        (out / f"{stem}.pgm").write_bytes(pgm_bytes(np.clip(np.rint(img), 0, 255)))
        (out / f"{stem}.lesion.pgm").write_bytes(pgm_bytes(lesion * 255))
        (out / f"{stem}.normal.pgm").write_bytes(pgm_bytes(normal * 255))


def one_image_idx(out: Path):
    pixels = bytes([0, 17, 34, 51, 68, 85, 102, 119, 136, 153, 170, 255])
    (out / "one-images.idx").write_bytes(struct.pack(">IIII", 0x803, 1, 3, 4) + pixels)
    (out / "one-labels.idx").write_bytes(gzip.compress(struct.pack(">II", 0x801, 1) + b"\x07",
                                                       mtime=0))

# ---------------------------------------------------------------------------
# straight-line forward pass of a tiny network


SHAPES = {
    "feature.w": (8, 1, 5, 5), "feature.b": (8,),
    "attention.w_f": (1, 8, 1, 1), "attention.w_g": (1, 8, 1, 1),
    "attention.w_h": (8, 8, 1, 1), "attention.alpha": (1,),
    "primary.w": (8, 8, 3, 3), "primary.b": (8,), "caps.w": (8, 2, 4, 4),
    "decoder.fc1.w": (8, 8), "decoder.fc1.b": (8,), "decoder.fc2.w": (8, 8),
    "decoder.fc2.b": (8,), "decoder.fc3.w": (8, 64), "decoder.fc3.b": (64,),
}


def conv(x, w, b):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((o, h - k + 1, wd - k + 1))
    for oc in range(o):
        for r in range(h - k + 1):
            for q in range(wd - k + 1):
                out[oc, r, q] = b[oc] + np.sum(x[:, r:r + k, q:q + k] * w[oc])
    return out


def squash(s):
    n2 = float(s @ s)
    return s * 0.0 if n2 == 0 else n2 / (1 + n2) * s / np.sqrt(n2)


def forward_one(x, p, sig, iters):
    feat = np.maximum(conv(x, p["feature.w"], p["feature.b"]), 0)
    c, h, w = feat.shape
    n = h * w
    flat = feat.reshape(c, n)
    wf = p["attention.w_f"][:, :, 0, 0] / sig[0]
    wg = p["attention.w_g"][:, :, 0, 0] / sig[1]
    wh = p["attention.w_h"][:, :, 0, 0] / sig[2]
    eta = np.array([[(wf @ flat[:, i]) @ (wg @ flat[:, j]) for j in range(n)] for i in range(n)])
    beta = np.exp(eta) / np.exp(eta).sum(axis=0, keepdims=True)
    o = np.zeros((c, n))
    for j in range(n):
        for i in range(n):
            o[:, j] += beta[i, j] * (wh @ flat[:, i])
    y = (p["attention.alpha"][0] * o + flat).reshape(c, h, w)
    prim = conv(y, p["primary.w"], p["primary.b"])  # (types*dim, gh, gw)
    types, dim = 2, 4
    gh, gw = prim.shape[1:]
    u = []
    for t in range(types):
        for r in range(gh):
            for q in range(gw):
                u.append(squash(prim[t * dim:(t + 1) * dim, r, q]))
    W = p["caps.w"]
    n_in, n_cls = W.shape[:2]
    u_hat = np.array([[W[i, j] @ u[i] for j in range(n_cls)] for i in range(n_in)])
    blog = np.zeros((n_in, n_cls))
    for it in range(iters):
        cc = np.exp(blog) / np.exp(blog).sum(axis=1, keepdims=True)
        v = np.array([squash(sum(cc[i, j] * u_hat[i, j] for i in range(n_in)))
                      for j in range(n_cls)])
        if it < iters - 1:
            blog = blog + np.einsum("ijd,jd->ij", u_hat, v)
    lengths = np.sqrt((v ** 2).sum(axis=1))
    keep = int(np.argmax(lengths))
    hvec = np.zeros_like(v)
    hvec[keep] = v[keep]
    hvec = hvec.reshape(-1)
    hvec = np.maximum(hvec @ p["decoder.fc1.w"] + p["decoder.fc1.b"], 0)
    hvec = np.maximum(hvec @ p["decoder.fc2.w"] + p["decoder.fc2.b"], 0)
    recon = 1 / (1 + np.exp(-(hvec @ p["decoder.fc3.w"] + p["decoder.fc3.b"])))
    return lengths, recon


def golden_forward(out: Path, seed=2024, iters=3):
    rng = np.random.default_rng(seed)
    p = {name: rng.normal(0, 0.4, shape) for name, shape in SHAPES.items()}
    p["attention.alpha"] = np.array([0.4])
    sig = [np.linalg.svd(p[k].reshape(p[k].shape[0], -1), compute_uv=False)[0]
           for k in ("attention.w_f", "attention.w_g", "attention.w_h")]
    x = rng.uniform(0, 1, (3, 1, 8, 8))
    res = [forward_one(x[b], p, sig, iters) for b in range(3)]
    np.savez(out / "golden-forward.npz", x=x, sigma=np.array(sig), routing_iters=iters,
             lengths=np.array([r[0] for r in res]), recon=np.array([r[1] for r in res]),
             **{f"param/{k}": v for k, v in p.items()})

# ---------------------------------------------------------------------------
# frozen reference run


GOLDEN_OVERRIDES = {"model.feature_channels": 8, "model.primary_types": 2,
                    "model.decoder_hidden1": 16, "model.decoder_hidden2": 16,
                    "data.n_samples": 100, "train.max_steps": 30, "train.batch_size": 16}


def golden_run(out: Path):
    from sacn.config import preset
    from sacn.data import synthetic_dataset, write_pgm
    from sacn.cli import main as cli
    from sacn.train import train, evaluate

    cfg = preset("synthetic-simple", **{k.replace(".", "__"): v
                                       for k, v in GOLDEN_OVERRIDES.items()})
    ds = synthetic_dataset("simple", cfg.data.n_samples, cfg.seed, 16)
    gdir = out / "golden"
    ds.save(gdir / "dataset")
    res = train(cfg, ds, timing=False)
    res.trainer.checkpoint().save(gdir / "checkpoint.sacn")
    ds = type(ds).load(gdir / "dataset")  # evaluate on the byte-quantised copy
    acc = evaluate(res.model, *ds.subset("test")).accuracy
    (gdir / "test-accuracy.txt").write_text(f"{acc!r}\n")
    write_pgm(gdir / "query.pgm", ds.x[0, 0])
    cli(["export-attn", "--checkpoint", str(gdir / "checkpoint.sacn"), "--image",
         str(gdir / "query.pgm"), "--location", "5,7", "--out", str(gdir / "attn")])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    annotated(args.out / "annotated")
    one_image_idx(args.out)
    golden_forward(args.out)
    golden_run(args.out)


if __name__ == "__main__":
    main()
