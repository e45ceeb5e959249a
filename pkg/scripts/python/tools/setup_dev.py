#!/usr/bin/env python3
"""
Set up a development environment: dependencies, pre-commit hooks and a
synthetic WFDB dataset for quick experiments.
"""
import subprocess
import sys

SYNTH_DIR = "data/synth"


def run_command(cmd, description):
    """Run a command and return success status."""
    print(f"{description}...")
    try:
        subprocess.run(cmd, check=True, capture_output=True, text=True)
        print(f"  done: {description}")
        return True
    except subprocess.CalledProcessError as e:
        print(f"  failed: {description}: {e.stderr}")
        return False


def main():
    """Install dependencies, hooks and a small synthetic dataset."""
    print("Setting up the ecgforge development environment\n")

    if not run_command(
        [sys.executable, "-m", "pip", "install", "-r", "scripts/python/requirements/test-requirements.txt"],
        "Installing Python dependencies",
    ):
        return False

    if not run_command(["pre-commit", "install"], "Installing pre-commit hooks"):
        return False

    if not run_command(
        [
            sys.executable,
            "scripts/python/production/ecgforge_cli.py",
            "synth",
            "--patients",
            "40",
            "--out-dir",
            SYNTH_DIR,
        ],
        f"Writing a synthetic dataset to {SYNTH_DIR}",
    ):
        return False

    print(f"\nTry: ECGFORGE_DATA={SYNTH_DIR} python scripts/python/production/ecgforge_cli.py ingest --out-dir out")
    return True


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
