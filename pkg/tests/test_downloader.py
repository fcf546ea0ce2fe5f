import shutil
import tempfile
import unittest
from pathlib import Path

import requests

import openworld_bench
from openworld_bench.datasets import DatasetError
from openworld_bench.downloader import MnistDownloader, fetch_mnist


class StubResponse:
    def __init__(self, content=b'payload', status=200):
        self.content = content
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError(f"{self.status} error")


class StubSession:
    """Replays queued outcomes; an exception instance in the queue is raised."""

    def __init__(self, outcomes=None):
        self.outcomes = list(outcomes or [])
        self.urls = []

    def get(self, url, timeout=None):
        self.urls.append(url)
        outcome = self.outcomes.pop(0) if self.outcomes else StubResponse()
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


class TestMnistDownloader(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_retries_then_succeeds(self):
        session = StubSession([requests.ConnectionError('reset'), StubResponse(status=503), StubResponse(b'ok')])
        downloader = MnistDownloader(mirror='http://mirror.test/mnist', retry_delay=0, session=session)
        path = downloader.fetch_file('t10k-labels-idx1-ubyte.gz', self.tmp_dir)
        self.assertEqual(path.read_bytes(), b'ok')
        self.assertEqual(session.urls, ['http://mirror.test/mnist/t10k-labels-idx1-ubyte.gz'] * 3)
        self.assertFalse(list(self.tmp_dir.glob('*.part')))

    def test_gives_up(self):
        session = StubSession([StubResponse(status=404)] * 3)
        downloader = MnistDownloader(mirror='http://mirror.test/', max_retries=1, retry_delay=0, session=session)
        with self.assertRaises(DatasetError):
            downloader.fetch_file('t10k-labels-idx1-ubyte.gz', self.tmp_dir)
        self.assertEqual(len(session.urls), 2)
        self.assertFalse((self.tmp_dir / 't10k-labels-idx1-ubyte.gz').exists())

    def test_empty_body_is_retried(self):
        session = StubSession([StubResponse(b''), StubResponse(b'data')])
        downloader = MnistDownloader(mirror='http://mirror.test/', retry_delay=0, session=session)
        self.assertEqual(downloader.fetch_file('a.gz', self.tmp_dir).read_bytes(), b'data')

    def test_fetch_all_skips_existing(self):
        (self.tmp_dir / 'train-images-idx3-ubyte.gz').write_bytes(b'cached')
        session = StubSession()
        messages = []
        paths = fetch_mnist(self.tmp_dir, mirror='http://mirror.test/', session=session,
                            progress_callback=messages.append)
        self.assertEqual([p.name for p in paths], ['train-images-idx3-ubyte.gz', 'train-labels-idx1-ubyte.gz',
                                                    't10k-images-idx3-ubyte.gz', 't10k-labels-idx1-ubyte.gz'])
        self.assertEqual(len(session.urls), 3)
        self.assertEqual((self.tmp_dir / 'train-images-idx3-ubyte.gz').read_bytes(), b'cached')
        self.assertEqual(messages[0], '[1/4] train-images-idx3-ubyte.gz')

    def test_exported_from_package(self):
        self.assertIs(openworld_bench.fetch_mnist, fetch_mnist)


if __name__ == '__main__':
    unittest.main()
