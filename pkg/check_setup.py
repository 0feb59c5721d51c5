#!/usr/bin/env python
"""
Pre-run check script to verify the lab's dependencies, modules and
builtin systems before running experiments or the API server.
"""

import sys
import importlib.util
from pathlib import Path

# Colors for terminal output
COLORS = {
    'GREEN': '\033[92m',
    'YELLOW': '\033[93m',
    'RED': '\033[91m',
    'RESET': '\033[0m',
    'BOLD': '\033[1m'
}

BACKEND = Path(__file__).resolve().parent / 'backend'

REQUIRED_PACKAGES = ['numpy', 'scipy', 'pandas', 'pydantic', 'dotenv', 'fastapi', 'uvicorn', 'multipart']

LAB_MODULES = [
    'spectral_model', 'system_parser', 'rng', 'parallel', 'truth_mc',
    'closure_forecast', 'obs_stream', 'gain_kernels', 'filter_engine',
    'fp_oracle', 'experiments', 'outputs', 'lab_cli', 'main',
]


def print_colored(text, color):
    """Print colored text to the terminal."""
    print(f"{COLORS[color]}{text}{COLORS['RESET']}")


def check_package_installed(package_name):
    """Check if a Python package is installed."""
    spec = importlib.util.find_spec(package_name)
    return spec is not None


def check_packages():
    print_colored("\nChecking Python packages...", "BOLD")
    missing = [name for name in REQUIRED_PACKAGES if not check_package_installed(name)]
    if missing:
        print_colored(f"❌ Missing packages: {', '.join(missing)}. Please run 'pip install -r requirements.txt'.", "RED")
        return False
    if not check_package_installed('pytest'):
        print_colored("⚠️ pytest is not installed; the test suite will not run", "YELLOW")
    print_colored("✅ Packages look good!", "GREEN")
    return True


def check_modules():
    print_colored("\nChecking backend modules...", "BOLD")
    missing = [name for name in LAB_MODULES if not (BACKEND / f"{name}.py").exists()]
    if missing:
        print_colored(f"❌ Missing modules in {BACKEND}: {', '.join(missing)}", "RED")
        return False
    print_colored("✅ Backend modules present!", "GREEN")
    return True


def check_builtin_systems():
    print_colored("\nChecking builtin systems...", "BOLD")
    sys.path.insert(0, str(BACKEND))
    try:
        from experiments import BUILTIN_SYSTEMS, builtin_system
        for name in BUILTIN_SYSTEMS:
            system = builtin_system(name)
            print(f"  {name}: d={system.d}")
    except Exception as e:
        print_colored(f"❌ Builtin systems failed to load: {e}", "RED")
        return False
    print_colored("✅ Builtin systems load!", "GREEN")
    return True


def check_env_file():
    print_colored("\nChecking environment file...", "BOLD")
    if not Path('.env').exists():
        print_colored("⚠️ No .env file; defaults apply (see .env.example)", "YELLOW")
    else:
        print_colored("✅ .env found", "GREEN")
    return True


def main():
    """Run all checks and provide a summary."""
    print_colored("\n=== Pre-run Check for the Statistical Filtering Lab ===\n", "BOLD")

    checks = [
        ("Packages", check_packages),
        ("Backend Modules", check_modules),
        ("Environment", check_env_file),
    ]

    results = []
    for name, check_func in checks:
        results.append((name, check_func()))
    if results[0][1] and results[1][1]:
        results.append(("Builtin Systems", check_builtin_systems()))

    print_colored("\n=== Summary ===\n", "BOLD")
    all_passed = True
    for name, result in results:
        status = "✅ PASS" if result else "❌ FAIL"
        color = "GREEN" if result else "RED"
        print_colored(f"{status} - {name}", color)
        if not result:
            all_passed = False

    if all_passed:
        print_colored("\n✅ All checks passed! You can run the lab now.", "GREEN")
        print_colored("\nTo run an experiment, run:", "BOLD")
        print("  cd backend")
        print("  python lab_cli.py twin --builtin cubic1 --tau 0.001 --delta 0.01 --N 500 --T 1")
        print_colored("\nTo start the API server, run:", "BOLD")
        print("  cd backend")
        print("  python start_backend.py")
        return 0
    else:
        print_colored("\n❌ Some checks failed. Please fix the issues before running the lab.", "RED")
        return 1


if __name__ == "__main__":
    sys.exit(main())
