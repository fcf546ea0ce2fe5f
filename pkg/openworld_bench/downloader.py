import logging
import os
import time
from pathlib import Path
from typing import Callable, List, Optional

import requests
from dotenv import load_dotenv

from .datasets import MNIST_FILES, DatasetError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_MIRROR = 'https://storage.googleapis.com/cvdf-datasets/mnist/'


class MnistDownloader:
    """
    Fetches the four gzip-compressed MNIST IDX archives with retry logic.
    """

    def __init__(self, mirror: Optional[str] = None, max_retries: int = 3, retry_delay: float = 1.0,
                 timeout: float = 30.0, session: Optional[requests.Session] = None):
        """
        Initialize the downloader.

        Args:
            mirror: Base URL. If None, reads OPENWORLD_MNIST_MIRROR or uses the default mirror.
            max_retries: Maximum number of retries per file.
            retry_delay: Delay between retries in seconds (grows linearly per attempt).
            timeout: Per-request timeout in seconds.
            session: Optional requests session (tests pass a stub).
        """
        self.mirror = mirror or os.getenv('OPENWORLD_MNIST_MIRROR', DEFAULT_MIRROR)
        if not self.mirror.endswith('/'):
            self.mirror += '/'
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self.timeout = timeout
        self.session = session or requests.Session()

    def fetch_file(self, filename: str, dest: Path) -> Path:
        """
        Download one archive to ``dest`` unless it already exists.

        Raises:
            DatasetError: If all retries fail
        """
        target = dest / filename
        if target.exists() and target.stat().st_size > 0:
            logger.info("Already present: %s", target)
            return target

        url = self.mirror + filename
        for attempt in range(self.max_retries + 1):
            try:
                response = self.session.get(url, timeout=self.timeout)
                response.raise_for_status()
                if not response.content:
                    raise ValueError("Empty response body")
                tmp = target.with_suffix(target.suffix + '.part')
                tmp.write_bytes(response.content)
                tmp.replace(target)
                return target
            except (requests.RequestException, ValueError) as e:
                if attempt == self.max_retries:
                    raise DatasetError(f"Failed to fetch {url} after {self.max_retries + 1} attempts: {e}")
                logger.warning("Fetch of %s failed (%s), retrying", url, e)
                time.sleep(self.retry_delay * (attempt + 1))

        raise DatasetError(f"Unexpected error fetching {url}")


def fetch_mnist(dest: Path, mirror: Optional[str] = None, max_retries: int = 3,
                progress_callback: Optional[Callable[[str], None]] = None,
                session: Optional[requests.Session] = None) -> List[Path]:
    """
    Download MNIST train and test IDX archives into ``dest``.

    Returns:
        Paths of the four ``.gz`` files
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    downloader = MnistDownloader(mirror=mirror, max_retries=max_retries, session=session)
    names = [f"{stem}.gz" for pair in MNIST_FILES.values() for stem in pair]
    paths = []
    for idx, name in enumerate(names, 1):
        if progress_callback:
            progress_callback(f"[{idx}/{len(names)}] {name}")
        paths.append(downloader.fetch_file(name, dest))
    return paths
