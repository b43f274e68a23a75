"""

    utils.py

        Small helpers shared by the library classes: logger setup, short hashes, atomic file writes

"""

import os
import logging
import hashlib
import base64
import tempfile
from pathlib import Path

from dotenv import dotenv_values

CONFIG = dotenv_values()

HASH_LENGTH_TRUNCATE = 11
LOG_FORMAT = '%(asctime)s %(name)s %(levelname)-4s %(message)s'


def setup_logger(name:str) -> logging.Logger:

    logger = logging.getLogger(name)
    level = os.environ.get('SEMCOMM_LOG_LEVEL') or CONFIG.get('SEMCOMM_LOG_LEVEL') or 'INFO'
    logger.setLevel(level=level)

    try:
        handler = logging.StreamHandler()
        handler.setLevel(level)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

        if (logger.hasHandlers()):  # see: http://tiny.cc/v5w6gz
            logger.handlers.clear()

        logger.addHandler(handler)

    except Exception as e:
        logger.error(e)

    return logger


def short_hash(inp:str) -> str:
    """ url-safe truncated md5, same form as the run and sweep point ids """
    return base64.urlsafe_b64encode(hashlib.md5(inp.encode()).digest())[:HASH_LENGTH_TRUNCATE].decode('utf-8')


def derive_seed(master_seed:int, key:str) -> int:
    """ Seed for a single sweep point: hash(master_seed, sweep_point) folded into 31 bits """
    digest = hashlib.md5(f'{master_seed}:{key}'.encode()).digest()
    return int.from_bytes(digest[:4], 'big') & 0x7FFFFFFF


def code_version_hash() -> str:
    """ md5 over the sources of this package, in sorted order """
    md5 = hashlib.md5()
    for path in sorted(Path(__file__).parent.glob('*.py')):
        md5.update(path.name.encode())
        md5.update(path.read_bytes())
    return md5.hexdigest()


def atomic_write_text(path:str|Path, content:str):
    """ Write to a temp file in the same directory and swap it in """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w') as f:
            f.write(content)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
