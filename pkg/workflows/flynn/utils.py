import logging
import sys
import time
from contextlib import contextmanager

from .errors import ModelFormatError

LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"

_configured = False


def print_logo(tool: str, tool_description: str, version: str):
    """Print the logo, tool name, and version for the tool.

    Parameters:
    tool : str
        The name of the tool.
    tool_description : str
        The description of the tool.
    version : str
        The version of the tool.
    """
    logo = r"""
     _____ _       _   _ _   _
    |  ___| |_   _| \ | | \ | |
    | |_  | | | | |  \| |  \| |
    |  _| | | |_| | |\  | |\  |
    |_|   |_|\__, |_| \_|_| \_|
             |___/
    """

    tool_name = f"{tool} ({version})\n{tool_description}"

    output = f"{'#'*80}\n{logo}\n{tool_name}\n\n{'#'*80}\n"

    print(output)


def get_logger(name: str) -> logging.Logger:
    """Return a logger under the 'flynn' namespace, installing the stream handler once."""
    global _configured
    root = logging.getLogger("flynn")
    if not _configured:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        root.setLevel(logging.INFO)
        root.propagate = False
        _configured = True
    if name.startswith("flynn"):
        return logging.getLogger(name)
    return root.getChild(name.rsplit(".", 1)[-1])


def set_log_level(verbose: bool = False, quiet: bool = False):
    get_logger("flynn")
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.getLogger("flynn").setLevel(level)


@contextmanager
def stopwatch():
    """Yield a dict whose 'seconds' entry is filled with the elapsed wall time on exit."""
    record = {"seconds": 0.0}
    start = time.perf_counter()
    try:
        yield record
    finally:
        record["seconds"] = time.perf_counter() - start


def encode_varint(value: int) -> bytes:
    """Encode a nonnegative integer as an unsigned LEB128 varint.

    Parameters:
    value : int
        The integer to encode.

    Returns:
    bytes
        The varint encoding (1 byte per 7 bits).

    Raises:
    ValueError
        If the value is negative.
    """
    if value < 0:
        raise ValueError(f"Varints encode nonnegative integers only, got {value}")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(buffer: bytes, offset: int) -> tuple:
    """Decode one varint starting at offset; returns (value, next_offset)."""
    value = 0
    shift = 0
    while True:
        if offset >= len(buffer):
            raise ModelFormatError("Truncated varint")
        byte = buffer[offset]
        offset += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, offset
        shift += 7
        if shift > 63:
            raise ModelFormatError("Varint longer than 64 bits")
