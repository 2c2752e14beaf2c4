"""Flask web service exposing the reconstruction pipeline.

Endpoints:
    POST /api/simulate              -> JSON phantom/config/seed, returns a frame id (raw + delayed)
    POST /api/beamform              -> upload a frame OR reference frame_id, returns an image id
    POST /api/evaluate              -> two image ids + metric list, returns a JSON metric report
    POST /api/train/start           -> dataset name (under datasets/) or frame ids + TrainConfig fields, returns job id
    GET  /api/train/events/<id>     -> SSE stream of epoch records
    GET  /api/train/result/<id>     -> model id and curve once the job is done
    GET  /api/download/<kind>/<id>  -> raw | frame | image | rf | model | curve

Artifacts live under ``app.config['OUTPUT_DIR']`` (default ``output/`` at the repository root).

Run locally:
    python scripts/run_web.py
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import uuid
from collections import OrderedDict
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from flask import Flask, Response, abort, jsonify, request, send_file, stream_with_context
from werkzeug.utils import secure_filename

from . import dataset, evaluation, training
from .beamform import BeamformConfig, reconstruct
from .container import read_frame, write_frame, write_rf
from .errors import DataError, NumericalError
from .metrics import LossConfig
from .network import NetworkConfig, save_checkpoint
from .sim import DelayedFrame, Phantom, TransducerConfig, apply_receive_delays, simulate_channel_data
from .utils import FRAME_EXTENSIONS, write_pgm

log = logging.getLogger(__name__)

_project_root = Path(__file__).resolve().parent.parent.parent

app = Flask(__name__)
app.config['OUTPUT_DIR'] = _project_root / 'output'
app.config['MAX_CONTENT_LENGTH'] = 512 * 1024 * 1024
app.config['MAX_JOBS'] = 32
app.config['JOB_TTL_S'] = 3600.0

# kind -> (subdirectory, file suffix)
_DOWNLOADS = {
    'raw': ('frames', '.raw.usrf'),
    'frame': ('frames', '.usrf'),
    'image': ('images', '.pgm'),
    'rf': ('images', '.usrb'),
    'model': ('models', '.usnn'),
    'curve': ('models', '.csv'),
}
_MIMETYPES = {'.pgm': 'image/x-portable-graymap', '.csv': 'text/csv'}
_ID_RE = re.compile(r'^[0-9a-f]{32}$')
_NAME_RE = re.compile(r'^[A-Za-z0-9][A-Za-z0-9_.-]*$')


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def _dir(name: str) -> Path:
    path = Path(app.config['OUTPUT_DIR']) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _artifact(kind: str, artifact_id: str) -> Path:
    if kind not in _DOWNLOADS:
        abort(404, description=f'Unknown artifact kind: {kind}')
    if not _ID_RE.match(artifact_id):
        abort(404, description='Invalid id')
    sub, suffix = _DOWNLOADS[kind]
    path = _dir(sub) / f'{artifact_id}{suffix}'
    if not path.exists():
        abort(404, description=f'{kind} {artifact_id} not found')
    return path


def _dataset_dir(name: str) -> Path:
    """A dataset directory under ``OUTPUT_DIR/datasets``; other server paths are refused."""
    root = _dir('datasets').resolve()
    if not _NAME_RE.match(name):
        abort(400, description=f'Invalid dataset name: {name}')
    path = (root / name).resolve()
    if path.parent != root:
        abort(400, description=f'Invalid dataset name: {name}')
    if not path.is_dir():
        abort(404, description=f'Dataset {name} not found')
    return path


def _payload() -> dict[str, Any]:
    """JSON body or form fields, whichever the request carries."""
    if request.is_json:
        data = request.get_json(silent=True)
        if not isinstance(data, dict):
            abort(400, description='Expected a JSON object')
        return data
    return _form_values()


def _form_values() -> dict[str, Any]:
    """Form fields with numeric and null strings decoded (`'8'` -> 8, `'null'` -> None)."""
    values: dict[str, Any] = {}
    for key, raw in request.form.items():
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    return values


def _save_upload(field_name: str) -> Path:
    f = request.files[field_name]
    original = secure_filename(f.filename or '')
    ext = Path(original).suffix.lower()
    if ext not in FRAME_EXTENSIONS:
        abort(400, description=f'Unsupported extension: {ext or "(none)"}')
    dest = _dir('uploads') / f'{uuid.uuid4().hex}{ext}'
    f.save(dest)
    return dest


def _load_frame(path: Path) -> DelayedFrame:
    try:
        frame, _ = read_frame(path)
    except DataError as e:
        abort(400, description=f'Invalid frame: {e}')
    return frame if isinstance(frame, DelayedFrame) else apply_receive_delays(frame)


def _config(factory, data: Any, what: str):
    try:
        return factory(data or {})
    except (DataError, KeyError, TypeError, ValueError) as e:
        abort(422, description=f'Invalid {what}: {e}')


def _numeric(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NumericalError as e:
        abort(502, description=f'Numerical failure: {e}')
    except DataError as e:
        abort(422, description=str(e))


def _train_config(data: dict[str, Any]) -> training.TrainConfig:
    """TrainConfig from request fields; the loss defaults to the desk-scale 7-tap window."""
    data = dict(data)
    data.setdefault('loss', {'msssim_window': 7})
    return training.TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Training jobs for progress SSE
# ---------------------------------------------------------------------------
@dataclass
class TrainJob:
    job_id: str
    created_at: float = field(default_factory=time.time)
    messages: list[dict] = field(default_factory=list)  # [{type, text, ts, ...}]
    result: dict | None = None
    error: str | None = None
    done: bool = False
    finished_at: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _cv: threading.Condition = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._cv = threading.Condition(self._lock)

    def push(self, typ: str, text: str, **data: Any) -> None:
        with self._lock:
            self.messages.append({'type': typ, 'text': text, 'ts': time.time(), **data})
            self._cv.notify_all()

    def complete(self, result: dict | None = None, error: str | None = None) -> None:
        with self._lock:
            self.result = result
            self.error = error
            self.done = True
            self.finished_at = time.time()
            self._cv.notify_all()


_JOBS: OrderedDict[str, TrainJob] = OrderedDict()
_JOBS_LOCK = threading.Lock()


def _evict_jobs(now: float) -> None:
    """Drop expired finished jobs, then the oldest finished ones until a slot is free. Caller holds _JOBS_LOCK."""
    ttl, cap = float(app.config['JOB_TTL_S']), int(app.config['MAX_JOBS'])
    for job_id, job in list(_JOBS.items()):
        if job.done and now - job.finished_at > ttl:
            del _JOBS[job_id]
    for job_id, job in list(_JOBS.items()):
        if len(_JOBS) < cap:
            break
        if job.done:
            del _JOBS[job_id]


def _new_job() -> TrainJob:
    job = TrainJob(uuid.uuid4().hex)
    with _JOBS_LOCK:
        _evict_jobs(job.created_at)
        _JOBS[job.job_id] = job
    return job


def _get_job(job_id: str) -> TrainJob:
    with _JOBS_LOCK:
        job = _JOBS.get(job_id)
    if not job:
        abort(404, description='Job not found')
    return job


def _run_train_job(
    job: TrainJob, samples: list[dataset.Sample], cfg: training.TrainConfig, network: NetworkConfig, models: Path
) -> None:
    def on_epoch(record: training.EpochRecord) -> None:
        job.push('epoch', f'epoch {record.epoch}/{cfg.epochs} loss={record.loss:.4f}', record=asdict(record))

    try:
        job.push('info', f'Training on {len(samples)} frames with loss {cfg.loss_fn}')
        result = training.train(samples, cfg, network=network, callback=on_epoch, progress=False)
        model_id = uuid.uuid4().hex
        save_checkpoint(models / f'{model_id}.usnn', result.net, {'train': cfg.to_dict(), 'held_out': result.held_out})
        training.write_curve(models / f'{model_id}.csv', result.curve)
        job.push('ok', 'Training completed')
        job.complete({
            'model_id': model_id,
            'download_url': f'/api/download/model/{model_id}',
            'curve_url': f'/api/download/curve/{model_id}',
            'final_loss': result.curve[-1].loss,
            'held_out': result.held_out,
        })
    except Exception as e:
        log.exception('[web] training job %s failed', job.job_id)
        job.push('error', f'Training failed: {e}')
        job.complete(None, error=str(e))


# ---------------------------------------------------------------------------
# Routes
# ---------------------------------------------------------------------------
@app.post('/api/simulate')
def simulate():  # type: ignore[override]
    data = _payload()
    if 'phantom' not in data:
        abort(400, description='Missing phantom')
    phantom = _config(Phantom.from_dict, data['phantom'], 'phantom')
    if data.get('config'):
        config = _config(TransducerConfig.from_dict, data['config'], 'config')
    else:
        config = TransducerConfig.desk() if data.get('desk', True) else TransducerConfig()
    try:
        seed = int(data.get('seed', 0))
    except (TypeError, ValueError):
        abort(422, description='seed must be an integer')
    raw = _numeric(simulate_channel_data, phantom, config, seed)
    frame_id = uuid.uuid4().hex
    frames = _dir('frames')
    meta = {'seed': seed, 'source': 'web'}
    write_frame(frames / f'{frame_id}.raw.usrf', raw, meta)
    write_frame(frames / f'{frame_id}.usrf', apply_receive_delays(raw), meta)
    return jsonify({
        'frame_id': frame_id,
        'shape': list(config.shape),
        'download_raw_url': f'/api/download/raw/{frame_id}',
        'download_url': f'/api/download/frame/{frame_id}',
    })


@app.post('/api/beamform')
def beamform():  # type: ignore[override]
    # Accept either an uploaded frame OR an existing frame_id
    if 'frame' in request.files and request.files['frame'].filename:
        path = _save_upload('frame')
        try:
            frame = _load_frame(path)
        finally:
            path.unlink(missing_ok=True)
        data = _form_values()
    else:
        data = _payload()
        frame_id = data.pop('frame_id', None)
        if not frame_id:
            abort(400, description='Provide a frame file or frame_id')
        frame = _load_frame(_artifact('frame', str(frame_id)))
    cfg = _config(BeamformConfig.from_dict, data, 'beamform parameters')
    image = _numeric(reconstruct, frame, cfg)
    image_id = uuid.uuid4().hex
    images = _dir('images')
    provenance = {'beamform': cfg.to_dict(), 'dynamic_range_db': cfg.dynamic_range_db, 'config': frame.config.to_dict()}
    write_pgm(images / f'{image_id}.pgm', image.display, provenance)
    write_rf(images / f'{image_id}.usrb', image.rf, provenance)
    return jsonify({
        'image_id': image_id,
        'method': cfg.method,
        'download_url': f'/api/download/image/{image_id}',
        'download_rf_url': f'/api/download/rf/{image_id}',
    })


@app.post('/api/evaluate')
def evaluate():  # type: ignore[override]
    data = _payload()
    if not data.get('a') or not data.get('b'):
        abort(400, description='Provide image ids a and b')
    metrics = data.get('metrics') or ['ssim', 'psnr']
    if isinstance(metrics, str):
        metrics = [m for m in metrics.split(',') if m]
    loss = _config(LossConfig.from_dict, data.get('loss'), 'loss config')
    a = evaluation.load_image(_artifact('image', str(data['a'])))
    b = evaluation.load_image(_artifact('image', str(data['b'])))
    records = _numeric(evaluation.compare_images, a.display, b.display, metrics, loss)
    return Response(
        json.dumps({'a': data['a'], 'b': data['b'], 'records': records}, allow_nan=True),
        mimetype='application/json',
    )


@app.post('/api/train/start')
def train_start():  # type: ignore[override]
    """Start training asynchronously and return a job id; progress via SSE."""
    data = _payload()
    cfg = _config(_train_config, data.get('train'), 'train config')
    network = _config(NetworkConfig.from_dict, data.get('network'), 'network config')
    targets = data.get('targets', 'mv')
    if data.get('dataset'):
        directory = _dataset_dir(str(data['dataset']))
        try:
            samples = dataset.load_dataset(directory, targets=targets, progress=False)
        except DataError as e:
            abort(400, description=str(e))
    elif data.get('frame_ids'):
        frames = [_load_frame(_artifact('frame', str(i))) for i in data['frame_ids']]
        if targets not in dataset.TARGETS:
            abort(422, description=f'Unknown targets: {targets}')
        configs = dataset.target_configs()
        samples = [_numeric(dataset.make_sample, f, configs, targets) for f in frames]
    else:
        abort(400, description='Provide dataset or frame_ids')

    job = _new_job()
    t = threading.Thread(target=_run_train_job, args=(job, samples, cfg, network, _dir('models')), daemon=True)
    t.start()
    return jsonify({'job_id': job.job_id})


def _event_stream(job: TrainJob) -> Iterator[str]:
    """SSE lines for every past and future message of ``job``, ending with a ``done`` event."""
    idx = 0
    while True:
        # copy under the lock, yield without holding it
        with job._lock:
            if idx == len(job.messages) and not job.done:
                job._cv.wait(timeout=1.0)
            pending = job.messages[idx:]
            idx += len(pending)
            done, result, error = job.done, job.result, job.error
        for evt in pending:
            yield f'data: {json.dumps(evt)}\n\n'
        if done:
            payload = {'type': 'done', 'result': result, 'error': error, 'ts': time.time()}
            yield f'data: {json.dumps(payload)}\n\n'
            return


@app.get('/api/train/events/<job_id>')
def train_events(job_id: str):  # type: ignore[override]
    job = _get_job(job_id)
    headers = {
        'Cache-Control': 'no-cache',
        'Content-Type': 'text/event-stream; charset=utf-8',
        'Connection': 'keep-alive',
        'X-Accel-Buffering': 'no',
    }
    return Response(stream_with_context(_event_stream(job)), headers=headers)


@app.get('/api/train/result/<job_id>')
def train_result(job_id: str):  # type: ignore[override]
    job = _get_job(job_id)
    with job._lock:
        if not job.done:
            return jsonify({'status': 'pending'})
        if job.error:
            return jsonify({'status': 'error', 'error': job.error}), 502
        return jsonify({'status': 'done', **(job.result or {})})


@app.get('/api/download/<kind>/<artifact_id>')
def download(kind: str, artifact_id: str):  # type: ignore[override]
    path = _artifact(kind, artifact_id)
    return send_file(
        str(path),
        as_attachment=True,
        download_name=path.name,
        mimetype=_MIMETYPES.get(path.suffix, 'application/octet-stream'),
    )


@app.errorhandler(400)
@app.errorhandler(404)
@app.errorhandler(422)
@app.errorhandler(502)
def _json_error(e):  # type: ignore[override]
    return jsonify({'error': e.description}), e.code


if __name__ == '__main__':  # pragma: no cover
    app.run(host='127.0.0.1', port=8000)
