"""
Formats the package and the tests with black, then sorts imports with isort.
``python cleancode.py --check`` only reports, and exits 1 if anything would change.
"""

from __future__ import annotations

import argparse
import pathlib
import subprocess
import sys

try:
    import black
except ImportError:
    print("We use black to format code. Please install it with 'pip install black'")
    raise SystemExit

try:
    import isort
except ImportError:
    print("We use isort to sort imports. Please install it with 'pip install isort'")
    raise SystemExit

PROJECT_NAME = "srnet"
ROOT = pathlib.Path(__file__).resolve().parent
TARGETS = (ROOT / PROJECT_NAME, ROOT / "tests", ROOT / "docs" / "source" / "conf.py", ROOT / "cleancode.py")
LINE_LENGTH = 119


def python_files():
    for target in TARGETS:
        if target.is_file():
            yield target
        elif target.is_dir():
            yield from sorted(target.rglob("*.py"))


def format_files(check: bool) -> bool:
    """
    Runs black over every target file.

    :return: Whether every file was already formatted.
    """

    mode = black.FileMode(line_length=LINE_LENGTH)
    write_back = black.WriteBack.CHECK if check else black.WriteBack.YES
    clean = True
    for path in python_files():
        if path.name == "__init__.py":
            continue
        if black.format_file_in_place(path, False, mode, write_back):
            clean = False
            print("Would reformat:" if check else "Formatted file:", path.relative_to(ROOT))
    return clean


def sort_imports(check: bool) -> bool:
    command = [sys.executable, "-m", "isort", "--profile", "black", "--line-length", str(LINE_LENGTH)]
    command += ["--skip", "__init__.py"]
    if check:
        command.append("--check-only")
    else:
        command += ["--add-import", "from __future__ import annotations"]
    command += [str(target.relative_to(ROOT)) for target in TARGETS]
    return subprocess.run(command, cwd=ROOT).returncode == 0


def cleanup_code(check: bool = False) -> int:
    print("====================== Formatting ======================")
    formatted = format_files(check)

    print("\n====================== Reorganizing imports ======================")
    sorted_imports = sort_imports(check)

    print("Done!")
    return 0 if formatted and sorted_imports else 1 if check else 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--check", action="store_true", help="report files that would change, write nothing")
    sys.exit(cleanup_code(parser.parse_args().check))
