from __future__ import annotations

import argparse
from pathlib import Path

from learned_beamforming.utils import configure_logging
from learned_beamforming.web import app


def main():
    parser = argparse.ArgumentParser(prog='run_web', description='Run the learned-beamforming Flask API')
    parser.add_argument('--host', default='127.0.0.1')
    parser.add_argument('--port', default=8000, type=int)
    parser.add_argument('--output', default='output', help='Directory for frames, images and models')
    args = parser.parse_args()

    configure_logging()
    app.config['OUTPUT_DIR'] = Path(args.output)
    url = f'http://{args.host if args.host != "0.0.0.0" else "localhost"}:{args.port}/api/'  # noqa: S104

    # Run the Flask app (blocking); threaded so SSE streams do not block other requests
    print(f'Starting learned-beamforming API at {url} (press CTRL+C to stop)')
    app.run(host=args.host, port=args.port, threaded=True)


if __name__ == '__main__':
    main()
