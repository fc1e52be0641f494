import asyncio
import time

import pytest

from flowreplay.clock import RealClock, SimulationStalled, VirtualClock, run_virtual, sleep_until


def test_sleep_until_is_exact_on_virtual_time():
    clock = VirtualClock()
    seen = []

    async def main():
        for delta in (500, 1, 7, 1_000_000, 3):
            target = clock.now_us() + delta
            await sleep_until(clock, target)
            seen.append(clock.now_us() - target)

    run_virtual(main(), clock)
    assert seen == [0] * 5


def test_past_target_returns_immediately():
    clock = VirtualClock()

    async def main():
        before = clock.now_us()
        await sleep_until(clock, before - 10)
        return clock.now_us() - before

    assert run_virtual(main(), clock) == 0


def test_hour_of_virtual_time_is_fast():
    clock = VirtualClock()
    t = time.perf_counter()
    run_virtual(sleep_until(clock, clock.now_us() + 3_600_000_000), clock)
    assert time.perf_counter() - t < 1.0
    assert clock.seconds() == pytest.approx(3600)


def test_concurrent_sleepers_wake_in_time_order():
    clock = VirtualClock()
    order = []

    async def sleeper(name, delta):
        await sleep_until(clock, clock.origin_us + delta)
        order.append((name, clock.now_us() - clock.origin_us))

    async def main():
        await asyncio.gather(sleeper("c", 300), sleeper("a", 100), sleeper("b", 200))

    run_virtual(main(), clock)
    assert order == [("a", 100), ("b", 200), ("c", 300)]


def test_deadlock_is_reported():
    async def main():
        await asyncio.get_running_loop().create_future()

    with pytest.raises(SimulationStalled):
        run_virtual(main())


def test_clock_cannot_go_backwards():
    with pytest.raises(ValueError):
        VirtualClock().advance(-1)


def test_real_clock_sleep_slack_is_informational():
    clock = RealClock()

    async def main():
        target = clock.now_us() + 10_000
        await sleep_until(clock, target)
        return clock.now_us() - target

    slack = asyncio.run(main())
    print(f"real-clock wake slack: {slack} us")
    assert slack >= 0
