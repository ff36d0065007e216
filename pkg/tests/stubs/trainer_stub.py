"""Scripted stand-in for an external training process.

Usage: trainer_stub.py <mode>; request JSON arrives on stdin.
"""
import json
import sys
import time

mode = sys.argv[1]
request = json.loads(sys.stdin.read())
assert "architecture_spec" in request and "train_config" in request
max_epochs = request["train_config"]["max_epochs"]


def emit(doc):
    print(json.dumps(doc), flush=True)


if mode == "ok":
    emit({"epoch": 1, "val_acc": 60.1})
    emit({"epoch": 2, "val_acc": 77.53})
    emit({"status": "ok", "val_acc": 77.53, "epochs_run": 2, "checkpoint_path": "ckpt"})
elif mode == "full":
    emit({"status": "ok", "val_acc": 50.0, "epochs_run": max_epochs, "checkpoint_path": "ckpt"})
elif mode == "noend":
    emit({"epoch": 1, "val_acc": 60.1})
elif mode == "error":
    emit({"status": "error", "detail": "oom"})
elif mode == "garbage":
    print("epoch 1 acc 0.6")
elif mode == "nonzero":
    sys.exit(3)
elif mode == "sleep":
    time.sleep(30)
else:
    sys.exit(f"unknown mode {mode}")
