from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel
from pathlib import Path
from typing import Any, Dict, List, Optional
import logging

from ..config import Config
from ..core.errors import ConfigError
from ..core.manifest import RunManifest
from ..core.model import count_params, param_breakdown

# Load environment variables from .env file if present
load_dotenv()

MANIFEST_NAME = "manifest.json"

logger = logging.getLogger("pcp_mae.api")


class InfoResponse(BaseModel):
    preset: str
    target_mode: str
    shared_params: int
    separate_params: int
    breakdown: Dict[str, int]
    config: Dict[str, Any]


class RunSummary(BaseModel):
    name: str
    command: str
    seed: int
    epochs_completed: int
    finished: bool
    summary: Dict[str, Any]


def _find_runs(runs_dir: Path) -> Dict[str, Path]:
    """runs_dir 直下と 1 段下 (アブレーションのセル) の manifest.json を探す"""
    if not runs_dir.is_dir():
        return {}
    found = {}
    for path in sorted(runs_dir.glob(MANIFEST_NAME)) + sorted(runs_dir.glob(f"*/{MANIFEST_NAME}")) \
            + sorted(runs_dir.glob(f"*/*/{MANIFEST_NAME}")):
        name = path.parent.relative_to(runs_dir).as_posix()
        if name != ".":
            found[name] = path
    return found


def create_app(runs_dir: Optional[str] = None) -> FastAPI:
    """実行結果を読むだけのサービス。runs_dir 省略時は PCPMAE_RUNS_DIR"""
    app = FastAPI(title="PCP-MAE runs")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.runs_dir = Path(runs_dir or Config().get_runs_dir())

    @app.get("/info", response_model=InfoResponse)
    async def info(preset: str = "desk", target: Optional[str] = None) -> InfoResponse:
        """プリセットの構成とパラメータ数を返す"""
        try:
            config = Config(preset=preset, overrides={"target_mode": target})
        except ConfigError as e:
            raise HTTPException(status_code=400, detail=str(e))
        mode = config.train.target_mode
        return InfoResponse(
            preset=config.preset,
            target_mode=mode,
            shared_params=count_params(config.model, True, mode),
            separate_params=count_params(config.model, False, mode),
            breakdown=param_breakdown(config.model, True, mode),
            config=config.snapshot(),
        )

    @app.get("/runs", response_model=List[RunSummary])
    async def list_runs() -> List[RunSummary]:
        """完了済みの実行を一覧する"""
        runs = []
        for name, path in _find_runs(app.state.runs_dir).items():
            try:
                manifest = RunManifest.load(path)
            except (OSError, ValueError, TypeError) as e:
                logger.warning(f"Skipping unreadable manifest {path}: {e}")
                continue
            runs.append(RunSummary(
                name=name,
                command=manifest.command,
                seed=manifest.seed,
                epochs_completed=len(manifest.rows),
                finished=manifest.finished_at is not None,
                summary=manifest.summary,
            ))
        return runs

    @app.get("/runs/{name:path}")
    async def get_run(name: str) -> Dict[str, Any]:
        """1 つの実行のマニフェストをそのまま返す"""
        path = _find_runs(app.state.runs_dir).get(name)
        if path is None:
            raise HTTPException(status_code=404, detail="Run not found")
        return RunManifest.load(path).to_dict()

    return app


app = create_app()
