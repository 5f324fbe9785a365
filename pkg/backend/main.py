from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, field_validator
from typing import Optional
import logging
import os

import numpy as np

from assignment import assignment_from_draws
from config import load_run_config
from errors import TransitError
from evaluation import crps_batch, diagnostics, predictive_samples
from gibbs import posterior_summary, run
from network import build_network, with_enumerated_paths
from simulate import SCALES, simulate_dataset
from storage import PosteriorStore
from trips import TripObservation, TripTable, write_trips

logging.basicConfig(level=getattr(logging, os.getenv("TRANSIT_LOG_LEVEL", "INFO").upper(), logging.INFO),
                    format="%(asctime)s %(levelname)s %(name)s %(message)s")
logger = logging.getLogger(__name__)

app = FastAPI(
    title="Metro Path Assignment API",
    description="""
    Bayesian path assignment for metro trip records.

    ## Features
    * 🧪 Synthetic networks and trips with known ground truth
    * 🔁 Gibbs sampling of network costs, route-choice coefficients and path choices
    * 📊 Posterior summaries, flow assignment and convergence diagnostics
    * 🎯 Posterior predictive travel times for new trips

    ## Workflow
    1. Simulate a dataset or bring a network and trip records
    2. Fit a run → posterior draws are written to the run store
    3. Read summaries, assignment and diagnostics, or score new trips
    """,
    version="1.0.0",
    license_info={
        "name": "MIT",
    },
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=os.getenv("CORS_ORIGINS", "*").split(","),
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Posterior store, one directory per run under RUNS_DIR
store = PosteriorStore()


def _http_error(e: TransitError) -> HTTPException:
    logger.error(f"[API] {type(e).__name__}: {e.message}")
    return HTTPException(status_code=e.http_status, detail={"error": type(e).__name__,
                                                             "message": e.message, "details": e.details})


class SimulateRequest(BaseModel):
    scale: str = "desk"
    seed: int = 0
    network: Optional[dict] = None

    @field_validator('scale')
    @classmethod
    def validate_scale(cls, v):
        if v not in SCALES:
            raise ValueError(f'scale must be one of {sorted(SCALES)}')
        return v


class TripIn(BaseModel):
    origin_id: str
    destination_id: str
    interval: int
    travel_time_s: Optional[float] = None

    @field_validator('interval')
    @classmethod
    def validate_interval(cls, v):
        if v < 1:
            raise ValueError('interval index starts at 1')
        return v


class FitRequest(BaseModel):
    run_id: str
    network: dict
    trips: list[TripIn]
    config: dict = {}

    @field_validator('trips')
    @classmethod
    def validate_trips(cls, v):
        if not v:
            raise ValueError('Please provide at least one trip')
        if any(t.travel_time_s is None for t in v):
            raise ValueError('Every trip used for fitting needs a travel time')
        return v


class PredictRequest(BaseModel):
    trips: list[TripIn]
    max_draws: Optional[int] = None
    quantiles: list[float] = [0.05, 0.5, 0.95]

    @field_validator('quantiles')
    @classmethod
    def validate_quantiles(cls, v):
        if any(not 0.0 < q < 1.0 for q in v):
            raise ValueError('Quantiles must lie in (0, 1)')
        return sorted(v)


@app.get("/", tags=["System"])
async def root():
    """API Health Check"""
    return {
        "status": "online",
        "message": "Metro Path Assignment API",
        "version": "1.0.0",
        "runs": len(store.list_runs()),
        "docs": "/docs"
    }


@app.post("/api/simulate", tags=["Data"], summary="Simulate Network and Trips")
def simulate(request: SimulateRequest):
    """Generate trips from a known ground truth; the response can be posted to /api/fit as-is"""
    try:
        cfg = load_run_config(overrides={"seed": request.seed, **SCALES[request.scale]})
        net = build_network(request.network) if request.network is not None else None
        net, truth, trips = simulate_dataset(cfg, request.scale, net)
    except TransitError as e:
        raise _http_error(e)
    return {
        "network": net.to_spec().model_dump(by_alias=True),
        "trips": trips.to_frame().to_dict(orient="records"),
        "n_trips": len(trips),
        "n_intervals": truth.T,
        "true_sigma": truth.sigma.as_array().tolist(),
        "true_q": [truth.ct.q1, truth.ct.q2],
    }


@app.post("/api/fit", tags=["Runs"], summary="Fit a Run")
def fit(request: FitRequest):
    """Run the sampler synchronously and store the posterior under run_id"""
    try:
        cfg = load_run_config(overrides=request.config)
        net = build_network(request.network)
        if not net.path_sets:
            net = with_enumerated_paths(net, k_max=cfg.k_max, detour_cap=cfg.detour_cap)
        trips = TripTable.from_records(
            TripObservation(origin=t.origin_id, destination=t.destination_id, t=t.interval, y=t.travel_time_s)
            for t in request.trips
        )
        if trips.interval.max() > cfg.n_intervals:
            raise HTTPException(status_code=422, detail=f"Trip intervals exceed n_intervals={cfg.n_intervals}")
        draws = run(trips, net, cfg, checkpoint_dir=store.run_dir(request.run_id))
        manifest = store.save(request.run_id, draws, net, cfg, trips.content_hash())
        write_trips(trips, os.path.join(store.run_dir(request.run_id), "trips.csv"))
    except TransitError as e:
        raise _http_error(e)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return {"success": True, "run_id": request.run_id, "manifest": manifest}


@app.get("/api/runs", tags=["Runs"], summary="List Runs")
def list_runs():
    return {"runs": store.list_runs()}


@app.get("/api/runs/{run_id}/summary", tags=["Runs"], summary="Posterior Summary")
def run_summary(run_id: str, level: Optional[float] = None):
    """Posterior means and credible intervals of sigma, q, Theta, Phi and the cost states"""
    try:
        draws, net, cfg, manifest = store.load(run_id)
        tables = posterior_summary(draws, level if level is not None else cfg.credible_level, net)
    except TransitError as e:
        raise _http_error(e)
    return {
        "run_id": run_id,
        "manifest": manifest,
        **{name: df.to_dict(orient="records") for name, df in tables.items()},
    }


@app.get("/api/runs/{run_id}/assignment", tags=["Runs"], summary="Path and Link Flows")
def run_assignment(run_id: str):
    try:
        draws, net, _, _ = store.load(run_id)
        result = assignment_from_draws(draws, net)
    except TransitError as e:
        raise _http_error(e)
    return {
        "run_id": run_id,
        "paths": result.paths.to_dict(orient="records"),
        "links": result.links.to_dict(orient="records"),
    }


@app.get("/api/runs/{run_id}/diagnostics", tags=["Runs"], summary="Convergence Diagnostics")
def run_diagnostics(run_id: str, threshold: Optional[float] = None):
    try:
        draws, _, cfg, _ = store.load(run_id)
        limit = threshold if threshold is not None else cfg.ess_threshold
        table = diagnostics(draws, limit, seed=cfg.seed)
    except TransitError as e:
        raise _http_error(e)
    return {
        "run_id": run_id,
        "threshold": limit,
        "flagged": int(table["flagged"].sum()),
        "parameters": table.astype(object).where(table.notna(), None).to_dict(orient="records"),
        "sampler_stats": draws.total_stats().as_dict(),
    }


@app.post("/api/runs/{run_id}/predict", tags=["Runs"], summary="Predict Travel Times")
def run_predict(run_id: str, request: PredictRequest):
    """Posterior predictive mean and quantiles per trip, plus CRPS where a travel time is given"""
    try:
        draws, net, cfg, _ = store.load(run_id)
        trips = TripTable.from_records(
            TripObservation(origin=t.origin_id, destination=t.destination_id, t=t.interval,
                            y=t.travel_time_s if t.travel_time_s is not None else 1.0)
            for t in request.trips
        )
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        samples = predictive_samples(trips, draws, net, rng, cfg.predictive_replicates,
                                     request.max_draws or cfg.predictive_draws,
                                     cfg.utility_time_unit_s, cfg.variance_floor_s)
    except TransitError as e:
        raise _http_error(e)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))

    quantiles = np.quantile(samples, request.quantiles, axis=1)
    observed = [t.travel_time_s for t in request.trips]
    scored = [i for i, y in enumerate(observed) if y is not None]
    crps = np.full(len(observed), np.nan)
    if scored and samples.shape[1] >= 2:
        crps[scored] = crps_batch(samples[scored], np.array([observed[i] for i in scored]))

    predictions = []
    for i, t in enumerate(request.trips):
        predictions.append({
            "origin_id": t.origin_id,
            "destination_id": t.destination_id,
            "interval": t.interval,
            "mean": float(samples[i].mean()),
            "quantiles": {str(q): float(v) for q, v in zip(request.quantiles, quantiles[:, i])},
            "crps": None if np.isnan(crps[i]) else float(crps[i]),
        })
    return {"run_id": run_id, "n_samples": int(samples.shape[1]), "predictions": predictions}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=int(os.getenv("PORT", "8000")))
