"""
The command-line workflow end to end
====================================

Each step below is what you would type in a shell, e.g.
``cdgan gen-phantoms --config spec.json --out data``. The commands are called
through :func:`cdgan.cli.main` so the whole pipeline runs as one script:
generate phantoms, train the GAN and a ResNet baseline, evaluate both, compare
them with a paired t-test and re-render a slice in every phase.
"""

import json
import shlex
from pathlib import Path

from cdgan.cli import main

root = Path("demo_output/cli")
root.mkdir(parents=True, exist_ok=True)


def run(cmd):
    print(f"$ cdgan {cmd}")
    code = main(shlex.split(cmd))
    if code != 0:
        raise SystemExit(f"exit code {code}")


# small phantoms; 32x32 images need 3 network stages for a 4x4 seed
(root / "spec.json").write_text(json.dumps(
    {"image_size": [32, 32], "slices_per_volume": 8, "subjects_per_phase": 4, "split_fraction": 0.75}))
(root / "train.json").write_text(json.dumps(
    {"iterations": 150, "checkpoint_interval": 150, "net": {"image_size": [32, 32], "stages": 3}}))

run(f"gen-phantoms --config {root}/spec.json --out {root}/data")
run(f"train --model cdgan --config {root}/train.json --train-manifest {root}/data/train.jsonl --out {root}/gan")
run(f"train --model resnet --iterations 150 --train-manifest {root}/data/train.jsonl --out {root}/resnet")

for m in ("gan", "resnet"):
    run(f"eval --checkpoint {root}/{m}/checkpoints/iter_0000150.ckpt "
        f"--test-manifest {root}/data/test.jsonl --out {root}/{m}/eval")

run(f"compare {root}/gan/eval {root}/resnet/eval --out {root}/compare")

# any test volume will do; the middle slice is used by default
volume = sorted((root / "data" / "volumes").glob("*.json"))[0]
run(f"synthesize --checkpoint {root}/gan/checkpoints/iter_0000150.ckpt --input {volume} "
    f"--target-phase all --out {root}/synth")
print(json.loads((root / "synth" / "run_record.json").read_text())["artifacts"])
