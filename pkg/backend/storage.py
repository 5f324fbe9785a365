"""
Posterior store: one directory per run.

    <RUNS_DIR>/<run_id>/
        manifest.json     hashes, seed, chain metadata, sampler counters
        config.env        the run configuration, key=value
        network.json      network and path sets the run was fitted on
        draws.npz         one array per parameter block, draws stacked first
        scalars.csv       sigma and q per stored draw
        trace.csv         block entry order per iteration
        *.csv / *.json    summaries written by later commands

The manifest carries no timestamps so identical runs give identical files.
"""

import hashlib
import json
import logging
import os
import re
from typing import Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from config import RunConfig, config_hash, load_run_config, write_run_config
from errors import StoreError
from gibbs import SIGMA_NAMES, PosteriorDraws
from network import NetworkModel, load_network, save_network
from samplers import SamplerStats

# Load .env file from the backend directory
load_dotenv(dotenv_path=os.path.join(os.path.dirname(__file__), '.env'))

logger = logging.getLogger(__name__)

STORE_FORMAT = 1
DRAW_BLOCKS = ("x", "sigma", "U", "V", "W", "q", "Ku", "theta", "phi", "z_counts", "chain", "iteration")
RUN_ID_PATTERN = re.compile(r'^[A-Za-z0-9_.-]+$')


def draws_hash(draws: PosteriorDraws) -> str:
    h = hashlib.sha256()
    for name in DRAW_BLOCKS:
        arr = np.ascontiguousarray(getattr(draws, name))
        h.update(name.encode())
        h.update(str(arr.dtype).encode() + str(arr.shape).encode())
        h.update(arr.tobytes())
    if draws.labels is not None:
        h.update(np.ascontiguousarray(draws.labels).tobytes())
    return h.hexdigest()


class PosteriorStore:
    def __init__(self, root: Optional[str] = None):
        self.root = root or os.getenv('RUNS_DIR', './runs')

    def run_dir(self, run_id: str) -> str:
        if not RUN_ID_PATTERN.match(run_id):
            raise StoreError(f"Invalid run id '{run_id}'")
        return os.path.join(self.root, run_id)

    def exists(self, run_id: str) -> bool:
        return os.path.exists(os.path.join(self.run_dir(run_id), "manifest.json"))

    def list_runs(self) -> list[str]:
        if not os.path.isdir(self.root):
            return []
        return sorted(d for d in os.listdir(self.root) if self.exists(d))

    def _require(self, run_id: str) -> str:
        path = self.run_dir(run_id)
        if not os.path.exists(os.path.join(path, "manifest.json")):
            raise StoreError(f"Run '{run_id}' not found in {self.root}")
        return path

    def save(self, run_id: str, draws: PosteriorDraws, net: NetworkModel, cfg: RunConfig,
             data_hash: str) -> dict:
        """Write a complete run and return its manifest"""
        path = self.run_dir(run_id)
        try:
            os.makedirs(path, exist_ok=True)
            arrays = {name: getattr(draws, name) for name in DRAW_BLOCKS}
            if draws.labels is not None:
                arrays["labels"] = draws.labels
            np.savez_compressed(os.path.join(path, "draws.npz"), **arrays)

            scalars = pd.DataFrame(np.column_stack([draws.sigma, draws.q]),
                                   columns=list(SIGMA_NAMES) + ["q1", "q2"])
            scalars.insert(0, "iteration", draws.iteration)
            scalars.insert(0, "chain", draws.chain)
            scalars.to_csv(os.path.join(path, "scalars.csv"), index=False)

            trace = pd.DataFrame([(c, i, b) for c, steps in sorted(draws.trace.items()) for i, b in steps],
                                 columns=["chain", "iteration", "block"])
            trace.to_csv(os.path.join(path, "trace.csv"), index=False)

            write_run_config(cfg, os.path.join(path, "config.env"))
            save_network(net, os.path.join(path, "network.json"))

            manifest = {
                "format": STORE_FORMAT,
                "run_id": run_id,
                "config_hash": config_hash(cfg),
                "seed": cfg.seed,
                "chains": draws.chains,
                "n_draws": draws.n_draws,
                "draws_per_chain": {str(c): int(np.sum(draws.chain == c)) for c in draws.chains},
                "choice_variant": cfg.choice_variant,
                "rank": cfg.rank,
                "n_intervals": cfg.n_intervals,
                "network_hash": net.network_hash,
                "data_hash": data_hash,
                "draws_hash": draws_hash(draws),
                "labels_stored": draws.labels is not None,
                "sampler_stats": {str(c): s.as_dict() for c, s in sorted(draws.stats.items())},
            }
            self.write_json(run_id, "manifest", manifest)
        except OSError as e:
            raise StoreError(f"Could not write run '{run_id}' to {path}", [str(e)]) from e
        logger.info(f"[Store] Saved run '{run_id}' ({draws.n_draws} draws) to {path}")
        return manifest

    def manifest(self, run_id: str) -> dict:
        return self.read_json(run_id, "manifest")

    def load(self, run_id: str) -> tuple[PosteriorDraws, NetworkModel, RunConfig, dict]:
        path = self._require(run_id)
        manifest = self.manifest(run_id)
        if manifest.get("format", 0) > STORE_FORMAT:
            raise StoreError(f"Run '{run_id}' uses store format {manifest['format']}, "
                             f"this build reads up to {STORE_FORMAT}")
        with np.load(os.path.join(path, "draws.npz")) as data:
            arrays = {name: data[name] for name in DRAW_BLOCKS}
            labels = data["labels"] if "labels" in data.files else None
        stats = {int(c): SamplerStats(**s) for c, s in manifest.get("sampler_stats", {}).items()}
        draws = PosteriorDraws(**arrays, labels=labels, stats=stats)
        net = load_network(os.path.join(path, "network.json"))
        cfg = load_run_config(os.path.join(path, "config.env"), use_env=False)
        if net.network_hash != manifest["network_hash"]:
            raise StoreError(f"Run '{run_id}': stored network does not match its manifest hash")
        return draws, net, cfg, manifest

    def write_table(self, run_id: str, name: str, df: pd.DataFrame) -> str:
        target = os.path.join(self.run_dir(run_id), f"{name}.csv")
        os.makedirs(os.path.dirname(target), exist_ok=True)
        df.to_csv(target, index=False)
        return target

    def read_table(self, run_id: str, name: str) -> pd.DataFrame:
        target = os.path.join(self._require(run_id), f"{name}.csv")
        if not os.path.exists(target):
            raise StoreError(f"Run '{run_id}' has no table '{name}'")
        return pd.read_csv(target)

    def write_json(self, run_id: str, name: str, payload: dict) -> str:
        target = os.path.join(self.run_dir(run_id), f"{name}.json")
        os.makedirs(os.path.dirname(target), exist_ok=True)
        with open(target, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        return target

    def read_json(self, run_id: str, name: str) -> dict:
        target = os.path.join(self._require(run_id), f"{name}.json")
        try:
            with open(target, 'r', encoding='utf-8') as f:
                return json.load(f)
        except FileNotFoundError:
            raise StoreError(f"Run '{run_id}' has no document '{name}'")
        except json.JSONDecodeError as e:
            raise StoreError(f"Run '{run_id}': {name}.json is not valid JSON", [str(e)]) from e
