"""Runs generated PyTorch packages and reports facts about them as JSON.

Reads one job from stdin and writes one JSON result to stdout. Every job
names a directory holding generated packages (each a directory with an
``__init__.py``); that directory is put on ``sys.path``.
"""

import ast
import importlib
import json
import sys
import time
import traceback

import torch


def trainable(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def load(root, package, cls):
    if root not in sys.path:
        sys.path.insert(0, root)
    return getattr(importlib.import_module(package), cls)


def parse_all(files):
    for path in files:
        with open(path) as f:
            ast.parse(f.read(), filename=path)


def job_resnet(job):
    import torchvision

    start = time.time()
    parse_all(job["files"])
    model = load(job["root"], job["package"], job["class"])(**job.get("kwargs", {})).eval()
    reference = torchvision.models.resnet50().eval()
    out = {"params": trainable(model), "reference_params": trainable(reference)}

    # same tensors in the same order means the same architecture; copying the
    # reference weights over must then reproduce its outputs
    ours, theirs = model.state_dict(), reference.state_dict()
    shapes_match = [tuple(v.shape) for v in ours.values()] == [tuple(v.shape) for v in theirs.values()]
    out["state_shapes_match"] = shapes_match
    torch.manual_seed(0)
    x = torch.randn(*job["input"])
    with torch.no_grad():
        if shapes_match:
            model.load_state_dict(dict(zip(ours.keys(), theirs.values())))
            out["max_abs_diff"] = (model(x) - reference(x)).abs().max().item()
        y = model(x)
    out["output_shape"] = list(y.shape)
    out["seconds"] = time.time() - start
    return out


def job_relu(job):
    parse_all(job["files"])
    model = load(job["root"], job["package"], job["class"])()
    results = []
    for seed in job["seeds"]:
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(*job["input"], generator=g)
        y = model(x.clone())
        expected = torch.maximum(x, torch.zeros_like(x))
        results.append(bool(torch.equal(y, expected)))
    return {"exact": results}


def job_run(job):
    """Constructs and runs many models; reports success or the error."""
    results = []
    for item in job["items"]:
        entry = {"ok": False}
        try:
            cls = load(job["root"], item["package"], item["class"])
            torch.manual_seed(item.get("seed", 0))
            model = cls(**item.get("kwargs", {})).eval()
            xs = [torch.randn(*s) for s in item["inputs"]]
            with torch.no_grad():
                y = model(*xs)
            ys = y if isinstance(y, tuple) else (y,)
            entry = {"ok": True, "output_shapes": [list(t.shape) for t in ys], "params": trainable(model)}
        except Exception as e:  # the verdict is the point; keep the message for triage
            entry["error"] = "".join(traceback.format_exception_only(type(e), e)).strip()
        results.append(entry)
    return {"results": results}


def job_compare(job):
    """Builds two models under the same seed and compares them."""
    out = []
    for pair in job["pairs"]:
        models = []
        for side in (pair["a"], pair["b"]):
            torch.manual_seed(pair["seed"])
            models.append(load(job["root"], side["package"], side["class"])(**side.get("kwargs", {})).eval())
        torch.manual_seed(pair["seed"] + 1)
        x = torch.randn(*pair["input"])
        with torch.no_grad():
            ya, yb = models[0](x), models[1](x)
        out.append({
            "params": [trainable(m) for m in models],
            "equal": bool(torch.equal(ya, yb)),
            "output_shape": list(ya.shape),
        })
    return {"pairs": out}


def job_conditional(job):
    """Checks both truth values of a flag against a functional reference.

    The reference is evaluated from the model's own branch weights, looked up
    by the state-dict prefixes given in the job.
    """
    import torch.nn.functional as F

    cls = load(job["root"], job["package"], job["class"])
    out = []
    for flag in (True, False):
        torch.manual_seed(0)
        model = cls(**{job["flag"]: flag}).eval()
        state = model.state_dict()
        branches = {name: any(k.startswith(prefix + ".") for k in state) for name, prefix in job["branches"].items()}
        side = job["branches"]["then" if flag else "else"]
        spec = job["reference"]["then" if flag else "else"]
        x = torch.randn(*job["input"])
        with torch.no_grad():
            y = model(x)
            r = F.conv2d(x, state[side + ".weight"], state[side + ".bias"], padding=spec["padding"])
            r = torch.tanh(r)
        out.append({"flag": flag, "branches_present": branches, "equal": bool(torch.allclose(y, r, rtol=0, atol=0))})
    return {"cases": out}


JOBS = {
    "resnet": job_resnet,
    "relu": job_relu,
    "run": job_run,
    "compare": job_compare,
    "conditional": job_conditional,
}


def main():
    job = json.load(sys.stdin)
    json.dump(JOBS[job["kind"]](job), sys.stdout)


if __name__ == "__main__":
    main()
