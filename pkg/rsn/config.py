import os
from dotenv import load_dotenv
from pathlib import Path

# Get the base directory
BASE_DIR = Path(__file__).resolve().parent.parent

for _env_file in (BASE_DIR / '.env',):
    if _env_file.exists():
        load_dotenv(dotenv_path=_env_file, override=False)


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() in ['1', 'true', 'yes']


class Config:
    # ====== Worker Pool ======
    # Caps the number of scenes processed concurrently
    THREADS = int(os.getenv('RSN_THREADS', str(os.cpu_count() or 1)))

    # ====== Output ======
    OUTPUT_DIR = Path(os.getenv('RSN_OUTPUT_DIR', str(BASE_DIR / 'output')))

    # ====== Logging ======
    LOG_LEVEL = os.getenv('RSN_LOG_LEVEL', 'INFO').upper()
    LOG_JSON = _env_flag('RSN_LOG_JSON', '0')

    # ====== Temporal Inference ======
    # Number of frames whose selected foreground points are kept for reuse
    FEATURE_CACHE_SIZE = int(os.getenv('RSN_FEATURE_CACHE_SIZE', '8'))
