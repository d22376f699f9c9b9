"""
This module contains the communication network emulator.

Every message crossing a NetemUnit is dropped or delayed according to a
NetworkSpec. The outcomes come from a SplitMix64 stream so that a given
seed replays the same delivery set on every platform:

    state = state + 0x9E3779B97F4A7C15            (mod 2**64)
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2**64)
    z = z ^ (z >> 31)
    u = (z >> 11) * 2**-53                        (uniform in [0, 1))

Message i consumes draws 2 i (loss) and 2 i + 1 (delay). It is delivered
iff the loss draw is >= loss_probability, after
``base_latency_s + jitter_s * (2 u - 1)`` seconds.
"""
import numpy as np
from sklearn.base import BaseEstimator

from .cosim import SimUnit
from .utils import (TICKS_PER_SECOND, to_seconds, format_ticks, write_csv,
                    check_seed, ParamsEqualityMixin)


GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_2 = np.uint64(0x94D049BB133111EB)

DELIVERY_DTYPE = np.dtype([
    ('delivered', np.bool_),
    ('delay_s', np.float64),
])

DELIVERY_LOG_DTYPE = np.dtype([
    ('sequence', np.int64),
    ('send_ticks', np.int64),
    ('delivered', np.bool_),
    ('arrival_ticks', np.int64),
])


class NetworkSpec(ParamsEqualityMixin, BaseEstimator):
    """Latency, jitter and loss of a network link.

    Parameters
    ----------
    base_latency_s : float, optional(default=0.)
    jitter_s : float, optional(default=0.)
        Half-width of the uniform delay distribution, at most
        base_latency_s.
    loss_probability : float, optional(default=0.)
    seed : int, optional(default=0)
        Unsigned 64-bit seed of the generator.
    """
    def __init__(self, base_latency_s=0., jitter_s=0., loss_probability=0.,
                 seed=0):
        self.base_latency_s = base_latency_s
        self.jitter_s = jitter_s
        self.loss_probability = loss_probability
        self.seed = seed

    def _validate_parameters(self):
        if not self.base_latency_s >= 0:
            raise ValueError(f'base_latency_s={self.base_latency_s} must not '
                             f'be negative.')
        if not 0 <= self.jitter_s <= self.base_latency_s:
            raise ValueError(f'jitter_s={self.jitter_s} must be in '
                             f'[0, base_latency_s={self.base_latency_s}].')
        if not 0 <= self.loss_probability <= 1:
            raise ValueError(f'loss_probability={self.loss_probability} must '
                             f'be in [0, 1].')
        check_seed(self.seed)

    @property
    def lookahead_s(self):
        return self.base_latency_s - self.jitter_s


def splitmix64_uniform(seed, start, count):
    """Draws ``start .. start + count - 1`` of the stream, as floats."""
    index = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over='ignore'):
        z = np.uint64(seed) + index * GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * MIX_1
        z = (z ^ (z >> np.uint64(27))) * MIX_2
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2. ** -53


def _outcomes(spec, first_message, n_messages):
    draws = splitmix64_uniform(spec.seed, 2 * first_message, 2 * n_messages)
    delivered = draws[0::2] >= spec.loss_probability
    delays = spec.base_latency_s + spec.jitter_s * (2 * draws[1::2] - 1)
    return delivered, delays


def sample_stream(spec, n):
    """Outcomes of the first ``n`` messages sent through a link.

    Returns
    -------
    schedule : array of DELIVERY_DTYPE, shape=(n,)
    """
    spec._validate_parameters()
    if n < 1:
        raise ValueError(f'n={n} must be at least 1.')
    schedule = np.empty(n, dtype=DELIVERY_DTYPE)
    schedule['delivered'], schedule['delay_s'] = _outcomes(spec, 0, n)
    return schedule


class DeliveryTrace:
    """Per-message outcomes recorded by a NetemUnit."""
    def __init__(self, records):
        self.records = records

    def __len__(self):
        return self.records.shape[0]

    @property
    def delivered_fraction(self):
        if len(self) == 0:
            return np.nan
        return float(np.mean(self.records['delivered']))

    def to_csv(self, path):
        rows = [(r['sequence'], to_seconds(int(r['send_ticks'])),
                 bool(r['delivered']),
                 to_seconds(int(r['arrival_ticks'])) if r['delivered']
                 else np.nan)
                for r in self.records]
        return write_csv(path, ['sequence', 'send_time_s', 'delivered',
                                'arrival_time_s'], rows)


class NetemUnit(SimUnit):
    """Co-simulation unit delaying or dropping every message on 'tx'.

    Messages arriving on 'tx' are re-emitted on 'rx' at send time plus the
    sampled delay. Messages received late (after the unit has already
    committed past their timestamp) are sent at the committed time.
    """
    input_ports = {'tx': 'message'}
    output_ports = {'rx': 'message'}

    def __init__(self, spec, name='netem'):
        spec._validate_parameters()
        if not spec.lookahead_s > 0:
            raise ValueError(
                f'base_latency_s - jitter_s = {spec.lookahead_s!r} must be '
                f'strictly positive for a network unit (conservative '
                f'lookahead).')
        super().__init__(name, lookahead_s=spec.lookahead_s)
        self.spec = spec
        self._n_messages = 0
        self._records = []

    def accepts_step(self, step_ticks):
        return step_ticks > 0

    def advance(self, grant_ticks):
        self._check_grant(grant_ticks)
        while len(self.inbox) and self.inbox.peek().time < grant_ticks:
            event = self.inbox.pop()
            send_ticks = max(event.time, self.committed_ticks)
            delivered, delays = _outcomes(self.spec, self._n_messages, 1)
            sequence = self._n_messages
            self._n_messages += 1
            if delivered[0]:
                delay_ticks = int(round(delays[0] * TICKS_PER_SECOND))
                arrival = send_ticks + delay_ticks
                self.emit(arrival, 'rx', event.payload)
                self.log(send_ticks, 'deliver',
                         f'seq={sequence} from={event.source} '
                         f'arrival={format_ticks(arrival)}')
            else:
                arrival = -1
                self.log(send_ticks, 'drop',
                         f'seq={sequence} from={event.source}')
            self._records.append((sequence, send_ticks, bool(delivered[0]),
                                  arrival))
        self.committed_ticks = grant_ticks

    def trace(self):
        return DeliveryTrace(np.array(self._records,
                                      dtype=DELIVERY_LOG_DTYPE))


def make_netem_unit(spec, name='netem'):
    """Build the co-simulation unit of a network link.

    The unit declares ``base_latency_s - jitter_s`` as lookahead, which must
    be strictly positive.
    """
    return NetemUnit(spec, name=name)