"""Training must never see ground-truth boxes."""
import ast
import builtins
import io
import os

import pytest

import wstrack
from conftest import toy_plan
from wstrack.data import FirewallError, PresenceDataset, open_training_file
from wstrack.models import ModelConfig
from wstrack.trainer import train

TRAINING_MODULES = ["tensor", "nn", "convlstm", "models", "data", "trainer", "kernels", "_fallback"]
EVAL_ONLY = {"records", "pipeline", "metrics", "localizer", "tracker", "cli"}


def source(mod):
    path = os.path.join(os.path.dirname(wstrack.__file__), mod + ".py")
    with open(path) as fh:
        return ast.parse(fh.read(), path)


@pytest.mark.parametrize("mod", TRAINING_MODULES)
def test_training_modules_cannot_reach_eval_data(mod):
    tree = source(mod)
    parents = {}
    for node in ast.walk(tree):
        for child in ast.iter_child_nodes(node):
            parents[child] = node
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            assert (node.module or "").split(".")[-1] not in EVAL_ONLY, (mod, node.module)
            assert all(a.name != "read_gt_boxes" for a in node.names)
        if isinstance(node, ast.Name):
            assert node.id != "read_gt_boxes"
        if isinstance(node, ast.Constant) and isinstance(node.value, str):
            assert "boxes.csv" not in node.value
            if node.value == "eval":
                # the only allowed use names the folder the guard refuses
                call = parents[parents[node]]
                assert mod == "data" and isinstance(call, ast.Call) and getattr(call.func, "id", "") == "_inside"


def test_guard_refuses_eval_paths(toy_root):
    vid = os.listdir(toy_root / "eval")[0]
    with pytest.raises(FirewallError):
        open_training_file(toy_root, toy_root / "eval" / vid / "boxes.csv")
    # a path that only reaches eval/ through a symlink is refused too
    os.symlink(toy_root / "eval" / vid / "boxes.csv", toy_root / "sneaky.csv")
    try:
        with pytest.raises(FirewallError):
            open_training_file(toy_root, toy_root / "sneaky.csv")
    finally:
        os.remove(toy_root / "sneaky.csv")


def test_training_run_never_opens_eval(toy_root, monkeypatch):
    opened = []
    real_open = builtins.open
    real_listdir = os.listdir

    def spy_open(path, *a, **k):
        opened.append(os.path.realpath(path))
        return real_open(path, *a, **k)

    def spy_listdir(path="."):
        opened.append(os.path.realpath(path))
        return real_listdir(path)

    monkeypatch.setattr(builtins, "open", spy_open)
    monkeypatch.setattr(os, "listdir", spy_listdir)
    ds = PresenceDataset(toy_root, "train")
    plan = toy_plan(1, 1)
    train(ds, ModelConfig("R+CL+C", backbone=plan.backbone), plan, seed=0, sink=io.StringIO())
    monkeypatch.undo()
    eval_dir = os.path.realpath(toy_root / "eval")
    assert opened, "the spy saw no file access"
    assert not [p for p in opened if os.path.commonpath([p, eval_dir]) == eval_dir]


def test_train_accepts_only_presence_datasets(toy_root):
    plan = toy_plan(1, 0)
    with pytest.raises(TypeError):
        train({"root": str(toy_root)}, ModelConfig(backbone=plan.backbone), plan)
