"""
Rate Limiting for Remote Model Calls

Provides:
- Sliding-window request limiting (requests per window, blocking acquire)
- In-flight call limiting
- Per-adapter usage counters (calls, attempts, failures)

One limiter is shared by every worker thread that talks to the same endpoint.
"""

import logging
import threading
import time
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)


class RateLimiter:
    """Sliding-window limiter: at most max_requests starts per window_seconds."""

    def __init__(
        self,
        max_requests: int,
        window_seconds: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_requests < 1:
            raise ValueError(f"max_requests must be >= 1, got {max_requests}")
        self.max_requests = max_requests
        self.window_seconds = window_seconds
        self._clock = clock
        self._sleep = sleep
        self._timestamps: List[float] = []
        self._lock = threading.Lock()

    def check(self) -> Tuple[bool, Optional[float]]:
        """
        Record a request if the window has room.

        Returns:
            (is_allowed, retry_after_seconds)
        """
        with self._lock:
            now = self._clock()
            # Clean old entries outside window
            self._timestamps = [ts for ts in self._timestamps if now - ts < self.window_seconds]

            if len(self._timestamps) >= self.max_requests:
                retry_after = self.window_seconds - (now - min(self._timestamps))
                return False, max(retry_after, 0.0)

            self._timestamps.append(now)
            return True, None

    def acquire(self) -> float:
        """Block until a request slot is free; returns the time spent waiting."""
        waited = 0.0
        while True:
            allowed, retry_after = self.check()
            if allowed:
                return waited
            logger.debug("Rate limit reached, waiting %.3fs", retry_after)
            self._sleep(retry_after)
            waited += retry_after


class UsageCounter:
    """Thread-safe call statistics for one adapter."""

    def __init__(self):
        self._counts: Dict[str, int] = {'calls': 0, 'attempts': 0, 'failures': 0}
        self._lock = threading.Lock()

    def record(self, attempts: int, failed: bool = False) -> None:
        with self._lock:
            self._counts['calls'] += 1
            self._counts['attempts'] += attempts
            if failed:
                self._counts['failures'] += 1

    def get_stats(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)


class CallGate:
    """Combines the request-rate window with a cap on concurrent calls."""

    def __init__(self, requests_per_minute: Optional[int], max_in_flight: int = 4):
        self.limiter = RateLimiter(requests_per_minute) if requests_per_minute else None
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self.usage = UsageCounter()

    @contextmanager
    def slot(self):
        with self._slots:
            if self.limiter is not None:
                self.limiter.acquire()
            yield
