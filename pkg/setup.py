#!/usr/bin/env python3
"""
Setup and Quick Start Script for the demand-dispatch solver
Creates the backend environment and runs a smoke solve
"""

import platform
import subprocess
import sys
from pathlib import Path

VENV_PATH = Path("backend/venv")
SMOKE_OUT = Path("results/smoke")


def print_header():
    print("=" * 60)
    print("   Demand Dispatch - optimal allocation of flexible loads")
    print("   Setup and Quick Start Script")
    print("=" * 60 + "\n")


def check_python_version():
    """tomllib needs Python 3.11"""
    version = sys.version_info
    print(f"Python version: {version.major}.{version.minor}.{version.micro}")

    if version < (3, 11):
        print("Python 3.11 or higher is required")
        return False

    print("Python version is adequate")
    return True


def venv_executable(name):
    if platform.system() == "Windows":
        return str(VENV_PATH / "Scripts" / name)
    return str(VENV_PATH / "bin" / name)


def get_activation_command():
    if platform.system() == "Windows":
        return "backend\\venv\\Scripts\\activate"
    return "source backend/venv/bin/activate"


def create_virtual_environment():
    if VENV_PATH.exists():
        print("Virtual environment already exists")
        return True

    try:
        print("Creating virtual environment...")
        subprocess.run([sys.executable, '-m', 'venv', str(VENV_PATH)], check=True)
        print("Virtual environment created")
        return True
    except subprocess.CalledProcessError as e:
        print(f"Failed to create virtual environment: {e}")
        return False


def install_python_deps():
    try:
        print("Installing Python dependencies...")
        subprocess.run([venv_executable('pip'), 'install', '-r', 'backend/requirements.txt'],
                       check=True)
        print("Python dependencies installed")
        return True
    except subprocess.CalledProcessError as e:
        print(f"Failed to install Python dependencies: {e}")
        return False


def smoke_solve():
    """Solve the constant-load scenario and re-check the stored result"""
    scenario = 'backend/scenarios/trivial.toml'
    dispatch = 'backend/dispatch.py'
    try:
        print("Solving the trivial scenario...")
        subprocess.run([venv_executable('python'), dispatch, 'solve',
                        '--scenario', scenario, '--out', str(SMOKE_OUT)], check=True)
        subprocess.run([venv_executable('python'), dispatch, 'check',
                        '--solution', str(SMOKE_OUT / 'solution.csv'),
                        '--scenario', scenario], check=True)
        print(f"Smoke run passed, outputs in {SMOKE_OUT}")
        return True
    except subprocess.CalledProcessError as e:
        print(f"Smoke run failed (exit code {e.returncode})")
        return False


def show_next_steps():
    activation_cmd = get_activation_command()

    print("\nSetup Complete! Next Steps:")
    print("=" * 50)

    print("\n1. Activate the environment:")
    print(f"   {activation_cmd}")

    print("\n2. Solve the reference duck-curve scenario:")
    print("   python backend/dispatch.py solve --scenario backend/scenarios/five_class_duck.toml --out results/duck")

    print("\n3. Run a refinement study:")
    print("   python backend/dispatch.py sweep --scenario backend/scenarios/lq_two_class.toml --steps 48,96,192 --out results/sweep")

    print("\n4. Run the tests:")
    print("   pytest backend test_performance.py")


def main():
    print_header()

    if not check_python_version():
        return False

    steps = [
        ("Create Virtual Environment", create_virtual_environment),
        ("Install Python Dependencies", install_python_deps),
        ("Smoke Solve", smoke_solve),
    ]

    for step_name, step_func in steps:
        print(f"\n>> {step_name}...")
        if not step_func():
            print(f"Setup failed at: {step_name}")
            return False

    show_next_steps()
    return True


if __name__ == "__main__":
    success = main()

    if success:
        print("\nSetup completed successfully!")
    else:
        print("\nSetup failed. Please check the errors above.")

    sys.exit(0 if success else 1)
