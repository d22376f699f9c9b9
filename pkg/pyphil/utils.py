"""This module contains utility routines shared by the simulation modules."""
import csv
import numbers
import os
import tempfile

import numpy as np
from sklearn.utils import check_random_state


TICKS_PER_SECOND = 10 ** 9
FLOAT_FORMAT = '%.17g'
MAX_SEED = 2 ** 64


def format_float(value):
    """Format a number with 17 significant digits ('.' decimal separator)."""
    return FLOAT_FORMAT % value


def delay_samples(delay_s, dt, name='delay_s', rtol=1e-6):
    """Return the integer number of samples ``delay_s / dt``.

    Parameters
    ----------
    delay_s : float
        A nonnegative delay in seconds.
    dt : float
        The sample time in seconds.
    name : str, optional(default='delay_s')
        Name of the delay, used in error messages.
    rtol : float, optional(default=1e-6)
        Relative tolerance on the ratio before it is considered non
        integer.

    Returns
    -------
    n_samples : int
    """
    if dt <= 0:
        raise ValueError(f'dt={dt} must be strictly positive.')
    if delay_s < 0:
        raise ValueError(f'{name}={delay_s} must not be negative.')
    ratio = delay_s / dt
    n_samples = int(round(ratio))
    if abs(ratio - n_samples) > rtol * max(1., abs(ratio)):
        raise ValueError(f'delay/dt not integer: {name}={delay_s!r} is not '
                         f'an integer multiple of dt={dt!r}.')
    return n_samples


def check_seed(seed, name='seed'):
    """Validate an unsigned 64-bit seed and return it as an int."""
    try:
        value = int(seed)
    except (TypeError, ValueError):
        raise ValueError(f'{name}={seed!r} must be an unsigned 64-bit '
                         f'integer.') from None
    if value != seed or not 0 <= value < MAX_SEED:
        raise ValueError(f'{name}={seed} must be an unsigned 64-bit '
                         f'integer.')
    return value


def check_random_state_u64(random_state):
    """Like sklearn's check_random_state, for any unsigned 64-bit seed.

    Integer seeds are spread with numpy's SeedSequence into the 32-bit
    seed a RandomState accepts; None and RandomState instances are passed
    through.
    """
    if isinstance(random_state, (numbers.Integral, np.integer)):
        seed = check_seed(random_state, name='random_state')
        random_state = int(np.random.SeedSequence(seed).generate_state(1)[0])
    return check_random_state(random_state)


def to_ticks(seconds, name='time', rtol=1e-6):
    """Convert seconds to integer nanosecond ticks."""
    ticks = seconds * TICKS_PER_SECOND
    rounded = int(round(ticks))
    if abs(ticks - rounded) > rtol * max(1., abs(ticks)):
        raise ValueError(f'{name}={seconds!r} s is not representable with '
                         f'nanosecond resolution.')
    return rounded


def to_seconds(ticks):
    return ticks / TICKS_PER_SECOND


def format_ticks(ticks):
    """Print integer ticks as seconds with nanosecond resolution."""
    sign = '-' if ticks < 0 else ''
    seconds, nanos = divmod(abs(ticks), TICKS_PER_SECOND)
    return f'{sign}{seconds}.{nanos:09d}'


def _format_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-',
                                    suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'w', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    return path


def write_csv(path, header, rows, comments=()):
    """Atomically write a CSV file.

    Parameters
    ----------
    path : str
        Destination file.
    header : sequence of str
        Column names.
    rows : iterable of sequences
        The data rows. Floats are written with 17 significant digits.
    comments : sequence of str, optional(default=())
        Lines written before the header, each prefixed with ``'# '``.

    Returns
    -------
    path : str
    """
    lines = [f'# {comment}\n' for comment in comments]

    class _Sink:
        def write(self, chunk):
            lines.append(chunk)

    writer = csv.writer(_Sink(), lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(value) for value in row])
    return atomic_write_text(path, ''.join(lines))


def read_csv(path):
    """Read a file written by write_csv.

    Returns
    -------
    comments : list of str
    header : list of str
    rows : list of list of str
    """
    comments = []
    with open(path, newline='') as f:
        data_lines = []
        for line in f:
            if line.startswith('# '):
                comments.append(line[2:].rstrip('\n'))
            else:
                data_lines.append(line)
    reader = csv.reader(data_lines)
    header = next(reader)
    return comments, header, [row for row in reader]


def _params_equal(left, right):
    if isinstance(left, np.ndarray) or isinstance(right, np.ndarray):
        return np.array_equal(np.asarray(left), np.asarray(right))
    if isinstance(left, dict) and isinstance(right, dict):
        return (left.keys() == right.keys() and
                all(_params_equal(left[k], right[k]) for k in left))
    if isinstance(left, (list, tuple)) and isinstance(right, (list, tuple)):
        return (len(left) == len(right) and
                all(_params_equal(a, b) for a, b in zip(left, right)))
    return left == right


class ParamsEqualityMixin:
    """Value equality for parameter containers based on get_params()."""

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return _params_equal(self.get_params(deep=False),
                             other.get_params(deep=False))

    __hash__ = None
