"""Model files and the command line.

Trains a small model through the ``adaptive-dbn`` command, reloads it,
inspects it and shows that a damaged file is refused.
"""

import tempfile
from pathlib import Path

from adaptive_dbn import cli
from adaptive_dbn.serialize import CorruptFileError, load_model

small = ["--train-per-class", "100", "--test-per-class", "20", "--set", "structure.max_layers=2"]
with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    cli.main(["train", "--synthetic", "--seed", "7", "--out-dir", str(out / "run")] + small)
    model = load_model(out / "run" / "model.adbn")
    print("reloaded hidden sizes:", model.hidden_sizes)
    cli.main(["inspect", "--model", str(out / "run" / "model.adbn")])

    damaged = out / "damaged.adbn"
    blob = bytearray((out / "run" / "model.adbn").read_bytes())
    blob[100] ^= 1
    damaged.write_bytes(bytes(blob))
    try:
        load_model(damaged)
    except CorruptFileError as exc:
        print("damaged file refused:", exc)
