#!/usr/bin/env python3
"""Train a small LeNet-5 on MNIST digits and export it in the relab interchange format.

Input: a directory holding the `digits/<d>.json` files shipped by the `mnist` npm
package (each file: {"data": [...]} with 784 floats in [0, 1] per sample).

Output directory layout:
    manifest.json, <layer>.w.bin, <layer>.b.bin   (int32 little-endian, row-major)
    validation.qds, test.qds                       ("QDS1" datasets)
    provenance.json                                (float accuracy, calibration ranges)
"""

import argparse
import json
import math
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IMG = 28


def load_digits(root):
    xs, ys = [], []
    for d in range(10):
        with open(os.path.join(root, f"{d}.json")) as fh:
            data = np.asarray(json.load(fh)["data"], dtype=np.float32)
        imgs = data.reshape(-1, IMG, IMG)
        xs.append(imgs)
        ys.append(np.full(len(imgs), d, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


class LeNet5(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 6, 5)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(16 * 4 * 4, 120)
        self.fc2 = nn.Linear(120, 10)

    def forward(self, x, trace=None):
        a1 = F.relu(self.conv1(x))
        p1 = F.max_pool2d(a1, 2)
        a2 = F.relu(self.conv2(p1))
        p2 = F.max_pool2d(a2, 2)
        f1 = F.relu(self.fc1(p2.flatten(1)))
        out = self.fc2(f1)
        if trace is not None:
            trace.update(conv1=a1, conv2=a2, fc1=f1, fc2=out)
        return out


def train(model, x, y, epochs, seed):
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    xt = torch.from_numpy(x).unsqueeze(1)
    yt = torch.from_numpy(y)
    for epoch in range(epochs):
        perm = torch.randperm(len(xt), generator=g)
        model.train()
        total = 0.0
        for i in range(0, len(perm), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = F.cross_entropy(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        print(f"epoch {epoch + 1}: loss {total / len(perm):.4f}")


def float_accuracy(model, x, y):
    with torch.no_grad():
        pred = model(torch.from_numpy(x).unsqueeze(1)).argmax(1).numpy()
    return float((pred == y).mean())


def qfloor(x, scale, qmin, qmax):
    return np.clip(np.floor(x / scale), qmin, qmax).astype(np.int64)


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def write_i32(path, arr):
    arr = np.asarray(arr, dtype=np.int64)
    assert arr.min() >= -(2**31) and arr.max() < 2**31
    arr.astype("<i4").tofile(path)


def write_qds(path, images_q, labels):
    with open(path, "wb") as fh:
        fh.write(b"QDS1")
        fh.write(struct.pack("<I", len(labels)))
        for img, lab in zip(images_q, labels):
            fh.write(struct.pack("<B", int(lab)))
            fh.write(np.asarray(img, dtype="<i4").tobytes())


def int_forward(layers, input_q):
    """Integer pipeline mirroring the engine: HWC tensors, floor-free requantization."""
    x = input_q.astype(np.int64)
    for layer in layers:
        kind = layer["kind"]
        if kind == "conv2d":
            kh, kw, cin, cout = layer["w"].shape
            h, w, _ = x.shape
            oh, ow = h - kh + 1, w - kw + 1
            cols = np.empty((oh, ow, kh * kw * cin), dtype=np.int64)
            for ky in range(kh):
                for kx in range(kw):
                    cols[:, :, (ky * kw + kx) * cin:(ky * kw + kx + 1) * cin] = x[ky:ky + oh, kx:kx + ow, :]
            acc = cols @ layer["w"].reshape(-1, cout) + layer["b"]
            x = requant(acc, layer)
        elif kind == "dense":
            acc = x @ layer["w"] + layer["b"]
            x = requant(acc, layer)
        elif kind == "maxpool2x2":
            h, w, c = x.shape
            x = x[:h // 2 * 2, :w // 2 * 2, :].reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))
        elif kind == "flatten":
            x = x.reshape(-1)
    return x


def requant(acc, layer):
    v = round_half_away(acc.astype(np.float64) * layer["m"])
    return np.clip(v, layer["qmin"], layer["qmax"]).astype(np.int64)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--digits", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--bits", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n-val", type=int, default=1000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--calibrate-on", choices=["train", "validation"], default="validation",
                    help="split whose float activation ranges set the activation scales")
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    x, y = load_digits(args.digits)
    order = np.random.default_rng(args.seed).permutation(len(x))
    test_idx = order[:args.n_test]
    val_idx = order[args.n_test:args.n_test + args.n_val]
    train_idx = order[args.n_test + args.n_val:]
    assert not set(test_idx) & set(val_idx)

    model = LeNet5()
    train(model, x[train_idx], y[train_idx], args.epochs, args.seed)
    model.eval()
    acc_float = float_accuracy(model, x[test_idx], y[test_idx])
    print(f"float test accuracy {acc_float:.4f}")

    b = args.bits
    umax = 2**b - 1
    smax = 2**(b - 1) - 1
    trace = {}
    calib_idx = train_idx if args.calibrate_on == "train" else val_idx
    with torch.no_grad():
        model(torch.from_numpy(x[calib_idx]).unsqueeze(1), trace)
    ranges = {k: (float(v.min()), float(v.max())) for k, v in trace.items()}

    os.makedirs(args.out, exist_ok=True)
    s_in = 1.0 / umax
    act_scale = {"input": s_in}
    for name in ("conv1", "conv2", "fc1"):
        act_scale[name] = ranges[name][1] / umax
    logit_scale = max(abs(ranges["fc2"][0]), abs(ranges["fc2"][1])) / smax

    def qparams(scale, signed=False):
        d = {"bits": b, "scale": scale, "zero_point": 0}
        if signed:
            d["signed"] = True
        return d

    layers_json, int_layers = [], []
    prev_scale = s_in

    def mac_layer(name, kind, w, bias, geometry, out_scale, signed_out=False):
        nonlocal prev_scale
        s_w = float(np.abs(w).max()) / smax
        wq = qfloor(w, s_w, -smax, smax)
        bq = round_half_away(bias / (prev_scale * s_w)).astype(np.int64)
        write_i32(os.path.join(args.out, f"{name}.w.bin"), wq.reshape(-1))
        write_i32(os.path.join(args.out, f"{name}.b.bin"), bq)
        entry = {
            "name": name,
            "kind": kind,
            "geometry": geometry,
            "quant": qparams(out_scale, signed_out),
            "weight_quant": qparams(s_w, True),
            "weight_file": f"{name}.w.bin",
            "bias_file": f"{name}.b.bin",
        }
        layers_json.append(entry)
        int_layers.append({
            "kind": kind, "w": wq, "b": bq,
            "m": prev_scale * s_w / out_scale,
            "qmin": -smax if signed_out else 0,
            "qmax": smax if signed_out else umax,
        })
        prev_scale = out_scale

    def plain(name, kind):
        layers_json.append({"name": name, "kind": kind})
        int_layers.append({"kind": kind})

    sd = {k: v.detach().numpy().astype(np.float64) for k, v in model.state_dict().items()}
    conv_geom = lambda cin, cout: {"kernel": [5, 5], "stride": 1, "padding": 0,
                                   "in_channels": cin, "out_channels": cout}
    # torch conv weights are (cout, cin, kh, kw); the engine wants (kh, kw, cin, cout)
    mac_layer("conv1", "conv2d", sd["conv1.weight"].transpose(2, 3, 1, 0), sd["conv1.bias"],
              conv_geom(1, 6), act_scale["conv1"])
    plain("pool1", "maxpool2x2")
    mac_layer("conv2", "conv2d", sd["conv2.weight"].transpose(2, 3, 1, 0), sd["conv2.bias"],
              conv_geom(6, 16), act_scale["conv2"])
    plain("pool2", "maxpool2x2")
    plain("flatten", "flatten")
    # torch flattens CHW; the engine flattens HWC
    fc1 = sd["fc1.weight"].reshape(120, 16, 4, 4).transpose(2, 3, 1, 0).reshape(256, 120)
    mac_layer("fc1", "dense", fc1, sd["fc1.bias"], {"inputs": 256, "outputs": 120}, act_scale["fc1"])
    mac_layer("fc2", "dense", sd["fc2.weight"].T, sd["fc2.bias"], {"inputs": 120, "outputs": 10},
              logit_scale, signed_out=True)

    manifest = {
        "format_version": 1,
        "name": "lenet5",
        "input_shape": [IMG, IMG, 1],
        "input_params": qparams(s_in),
        "class_count": 10,
        "layers": layers_json,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    xq = qfloor(x.astype(np.float64), s_in, 0, umax)
    write_qds(os.path.join(args.out, "validation.qds"), xq[val_idx].reshape(len(val_idx), -1), y[val_idx])
    write_qds(os.path.join(args.out, "test.qds"), xq[test_idx].reshape(len(test_idx), -1), y[test_idx])

    correct = 0
    for i in test_idx:
        logits = int_forward(int_layers, xq[i].reshape(IMG, IMG, 1))
        correct += int(np.argmax(logits) == y[i])
    acc_int = correct / len(test_idx)
    print(f"integer test accuracy {acc_int:.4f}")

    with open(os.path.join(args.out, "provenance.json"), "w") as fh:
        json.dump({
            "seed": args.seed,
            "epochs": args.epochs,
            "bits": b,
            "train_samples": int(len(train_idx)),
            "calibrated_on": args.calibrate_on,
            "float_test_accuracy": acc_float,
            "integer_test_accuracy": acc_int,
            "float_ranges": {k: list(v) for k, v in ranges.items()},
        }, fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    main()
