import pytest

from rmaft.ftlog import FtLog
from rmaft.machine import Machine


@pytest.fixture
def logged():
    """A 4-process machine with 8-cell windows and logging attached."""
    log = FtLog(4)
    return Machine(4, 8, log=log), log
