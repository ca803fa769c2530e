"""Command-line entry point for nlclab.

Run with:
    python app.py born --alpha 0.7854 --gamma 0
    python app.py n-estimate --mass-kev 511 --window-ns 1
    python app.py mc --config experiment.json --samples 1000000 --workers 8 --out mc.csv

Settings can also come from QLAG_* environment variables or a local .env
file (QLAG_SEED, QLAG_WORKERS, QLAG_LOG_LEVEL, QLAG_TRACE_FILE,
QLAG_OUTPUT_DIR).
"""

from nlclab.cli import main


if __name__ == "__main__":
    main()
