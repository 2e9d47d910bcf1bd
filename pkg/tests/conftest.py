import pytest

from tests.fixtures import inventory, lexicon, lexicon_path  # noqa


@pytest.fixture(params=["asyncio", "trio"])
def anyio_backend(request):
    return request.param
