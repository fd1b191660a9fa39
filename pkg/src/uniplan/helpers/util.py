import hashlib
import json
from contextlib import contextmanager
from os import path


class DataReadException(Exception):
    pass


@contextmanager
def file_reader(filename):
    relative_filename = path.join(path.dirname(path.dirname(__file__)), filename)
    file = open(relative_filename)
    try:
        yield file
    finally:
        file.close()


def json_reader(filename):
    """Read a JSON document bundled under the package directory."""

    try:
        with file_reader(filename) as file:
            data = file.read()
    except OSError:
        raise FileNotFoundError(f"Could not find filename: {filename}")
    try:
        return json.loads(data)
    except json.JSONDecodeError:
        raise DataReadException(f"Could not decode data at: {filename}")


def load_json_file(filepath):
    """Read a JSON document from an arbitrary path."""

    with open(filepath, "r") as file:
        try:
            return json.load(file)
        except json.JSONDecodeError as e:
            raise DataReadException(f"Could not decode JSON at {filepath}: {e}")


def file_digest(filepath):
    sha = hashlib.sha256()
    with open(filepath, "rb") as file:
        for chunk in iter(lambda: file.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()


def abspath(current_path, relative_path):
    """Build an absolute path from relative path"""

    parent = path.abspath(path.dirname(current_path))
    return path.normpath(path.join(parent, relative_path))
