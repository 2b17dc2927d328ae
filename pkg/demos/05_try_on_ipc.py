"""Try-on over the wire: the pipeline driving an out-of-process backend.

Spawns the sd-adapter server (stub runtime) on a local TCP port, connects the
pipeline's IPC backend to it, and runs the same flow as the toy demo. The
adapter package must be installed (pip install -e adapter/).
"""

import socket
import subprocess
import time

import numpy as np

from tryon.pipeline import TryOnJob, run_try_on
from tryon.wire import IpcBackend

PORT = 48917


def wait_for_port(port, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.1)
    raise RuntimeError(f"server did not come up on port {port}")


def main():
    proc = subprocess.Popen(["sd-adapter", "--endpoint", f"ipc:tcp://127.0.0.1:{PORT}"])
    try:
        wait_for_port(PORT)
        be = IpcBackend(f"ipc:tcp://127.0.0.1:{PORT}")
        d = be.describe()
        print(f"remote backend: scale {d.latent_scale}, hook grids "
              f"{sorted(d.hook_layers.values())}, {d.num_steps} steps")

        rng = np.random.default_rng(1)
        person = rng.uniform(0, 1, (64, 64, 3))
        mask = np.zeros((64, 64), bool)
        mask[16:56, 12:52] = True
        job = TryOnJob(person=person, garment=person.copy(),
                       person_mask=mask, garment_mask=mask.copy(),
                       prompt="a person wearing the garment", seed=3)

        result = run_try_on(job, be)
        print(f"result shape {result.shape}, range "
              f"[{result.min():.2f}, {result.max():.2f}]")
        print(f"background preserved bit-exactly: "
              f"{np.array_equal(result[~mask], person[~mask])}")
        be.close()
    finally:
        proc.terminate()
        proc.wait()


if __name__ == "__main__":
    main()
