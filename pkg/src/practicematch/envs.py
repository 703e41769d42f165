"""Episodic environments with separate practice and match configurations.

Every environment exposes ``reset(mode, rng)`` and ``step(action, rng)``.
Observations carry the mode both as an attribute and as a trailing 0/1
feature (1 = match).  Extrinsic reward is always emitted, but forced to zero
in practice mode.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np


class Mode(enum.IntEnum):
    PRACTICE = 0
    MATCH = 1


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Observation:
    features: np.ndarray
    mode: Mode


@dataclass(frozen=True)
class StepResult:
    obs: Observation
    extrinsic_reward: float
    done: bool


def _obs(features, mode: Mode) -> Observation:
    f = np.empty(len(features) + 1)
    f[:-1] = features
    f[-1] = float(mode)
    return Observation(f, mode)


class Env:
    name = "env"
    n_actions: int
    obs_dim: int
    enumerable = False

    def reset(self, mode: Mode, rng: np.random.Generator) -> Observation:
        raise NotImplementedError

    def step(self, action: int, rng: np.random.Generator) -> StepResult:
        raise NotImplementedError

    def describe(self) -> str:
        return self.name


# --------------------------------------------------------------------------
# corridor

class Corridor(Env):
    """Trash-carrying corridor of ``length`` cells.

    Trash sits at x=0 and the bin at x=length-1.  Arriving at the bin with
    trash pays +1 (match only); the trash is lost on the following step.
    Arriving at x=0 without trash picks it up on the following step.
    """

    name = "corridor"
    n_actions = 2
    LEFT, RIGHT = 0, 1
    enumerable = True

    def __init__(self, length: int = 8, min_episode: int = 45, max_episode: int = 50,
                 encoding: str = "scalar"):
        if encoding not in ("scalar", "onehot"):
            raise ValueError(f"unknown corridor encoding {encoding!r}")
        self.length = length
        self.min_episode = min_episode
        self.max_episode = max_episode
        self.encoding = encoding
        self.obs_dim = (1 if encoding == "scalar" else length) + 2
        self.x = 0
        self.has_trash = True
        self.t = 0
        self.episode_length = min_episode
        self.mode = Mode.MATCH
        self.done = True

    def features(self, x: int, has_trash: bool, mode: Mode) -> np.ndarray:
        if self.encoding == "scalar":
            pos = [x / (self.length - 1)]
        else:
            pos = np.zeros(self.length)
            pos[x] = 1.0
        return _obs(np.concatenate([pos, [float(has_trash)]]), mode).features

    def observe(self) -> Observation:
        return Observation(self.features(self.x, self.has_trash, self.mode), self.mode)

    def reset(self, mode: Mode, rng: np.random.Generator) -> Observation:
        self.mode = Mode(mode)
        self.x = 0
        self.has_trash = True
        self.t = 0
        self.episode_length = int(rng.integers(self.min_episode, self.max_episode + 1))
        self.done = False
        return self.observe()

    def step(self, action: int, rng: np.random.Generator) -> StepResult:
        if self.done:
            raise EpisodeDoneError("step() called on a finished episode")
        if action not in (self.LEFT, self.RIGHT):
            raise ValueError(f"invalid corridor action {action}")
        last = self.length - 1
        # deferred flag changes from arriving at either end on the previous step
        if self.x == last and self.has_trash:
            self.has_trash = False
        elif self.x == 0 and not self.has_trash:
            self.has_trash = True
        prev = self.x
        self.x = min(max(self.x + (1 if action == self.RIGHT else -1), 0), last)
        reward = 1.0 if (self.x == last and prev != last and self.has_trash) else 0.0
        if self.mode is Mode.PRACTICE:
            reward = 0.0
        self.t += 1
        self.done = self.t >= self.episode_length
        return StepResult(self.observe(), reward, self.done)

    def describe(self) -> str:
        return (f"corridor: length {self.length}, trash at x=0, bin at x={self.length - 1}, "
                f"episodes of {self.min_episode}-{self.max_episode} steps, actions Left/Right, "
                f"features [x/{self.length - 1}, has_trash, mode]")


# --------------------------------------------------------------------------
# mini pong

class MiniPong(Env):
    """9x9 court; the agent paddle (height 2) is on column 8.

    Match: a scripted opponent on column 0 follows the ball with probability
    0.8 per step.  Practice: column 0 is a wall that reflects ``dx`` and keeps
    ``dy``.
    """

    name = "minipong"
    n_actions = 3
    UP, DOWN, STAY = 0, 1, 2
    SIZE = 9
    PADDLE = 2
    OPPONENT_TRACK_P = 0.8
    MATCH_POINTS = 5
    MATCH_MAX_STEPS = 500
    PRACTICE_STEPS = 200
    obs_dim = 7

    def __init__(self):
        self.mode = Mode.MATCH
        self.done = True
        self.t = 0
        self.score = 0
        self.ball = [4, 4]
        self.vel = [1, 0]
        self.agent_y = 3
        self.opp_y = 3

    def _serve(self, rng):
        self.ball = [self.SIZE // 2, self.SIZE // 2]
        self.vel = [int(rng.choice((-1, 1))), int(rng.integers(-1, 2))]

    def observe(self) -> Observation:
        top = self.SIZE - self.PADDLE
        half = (self.SIZE - 1) / 2
        opp = self.opp_y / top * 2 - 1 if self.mode is Mode.MATCH else 0.0
        f = [self.ball[0] / half - 1, self.ball[1] / half - 1, self.vel[0], self.vel[1],
             self.agent_y / top * 2 - 1, opp]
        return _obs(f, self.mode)

    def reset(self, mode: Mode, rng: np.random.Generator) -> Observation:
        self.mode = Mode(mode)
        self.t = 0
        self.score = 0
        self.agent_y = self.opp_y = (self.SIZE - self.PADDLE) // 2
        self._serve(rng)
        self.done = False
        return self.observe()

    def _move_paddle(self, y, dy):
        return min(max(y + dy, 0), self.SIZE - self.PADDLE)

    def step(self, action: int, rng: np.random.Generator) -> StepResult:
        if self.done:
            raise EpisodeDoneError("step() called on a finished episode")
        if action not in (self.UP, self.DOWN, self.STAY):
            raise ValueError(f"invalid pong action {action}")
        self.agent_y = self._move_paddle(self.agent_y, {self.UP: -1, self.DOWN: 1, self.STAY: 0}[action])
        if self.mode is Mode.MATCH and rng.random() < self.OPPONENT_TRACK_P:
            centre = self.opp_y + 0.5
            if self.ball[1] < centre:
                self.opp_y = self._move_paddle(self.opp_y, -1)
            elif self.ball[1] > centre:
                self.opp_y = self._move_paddle(self.opp_y, 1)

        x, y = self.ball
        dx, dy = self.vel
        nx, ny = x + dx, y + dy
        if ny < 0:
            ny, dy = -ny, -dy
        elif ny > self.SIZE - 1:
            ny, dy = 2 * (self.SIZE - 1) - ny, -dy
        reward = 0.0
        if nx >= self.SIZE - 1:
            k = ny - self.agent_y
            if 0 <= k < self.PADDLE:
                dx, dy = -1, (-1, 1)[k]
                nx = self.SIZE - 1
            else:
                reward = -1.0
        elif nx <= 0:
            if self.mode is Mode.PRACTICE:
                dx, nx = 1, 0
            else:
                k = ny - self.opp_y
                if 0 <= k < self.PADDLE:
                    dx, dy = 1, (-1, 1)[k]
                    nx = 0
                else:
                    reward = 1.0
        self.ball, self.vel = [nx, ny], [dx, dy]
        if reward:
            self._serve(rng)
        self.t += 1
        if self.mode is Mode.MATCH:
            self.score += int(reward)
            self.done = abs(self.score) >= self.MATCH_POINTS or self.t >= self.MATCH_MAX_STEPS
        else:
            reward = 0.0
            self.done = self.t >= self.PRACTICE_STEPS
        return StepResult(self.observe(), reward, self.done)

    def describe(self) -> str:
        return ("minipong: 9x9 court, agent paddle (height 2) on column 8, actions Up/Down/Stay.\n"
                "match: opponent on column 0 tracks the ball with p=0.8; +1 when it misses, -1 when the "
                "agent misses; ends at |score| = 5 or 500 steps.\n"
                "practice: column 0 is a wall (dx reflected, dy kept), 200 steps, no extrinsic reward.\n"
                "features [ball_x, ball_y, ball_dx, ball_dy, agent_y, opponent_y, mode]")


# --------------------------------------------------------------------------
# mini pacman

PACMAN_MAZE = (
    "########",
    "#......#",
    "#.##.#.#",
    "#......#",
    "#.#.##.#",
    "#......#",
    "#.##...#",
    "########",
)
# (x, y) cells, y grows downwards
PACMAN_PELLETS = ((1, 1), (6, 1), (3, 1), (1, 3), (4, 3), (6, 3), (3, 5), (1, 6), (6, 5), (5, 6))
PACMAN_AGENT_START = (1, 5)
PACMAN_GHOST_START = (6, 6)


class MiniPacMan(Env):
    """8x8 maze with 10 pellets.  Match adds one ghost; practice has none."""

    name = "minipacman"
    n_actions = 4
    UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
    MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))
    GHOST_CHASE_P = 0.5
    MATCH_MAX_STEPS = 200
    PRACTICE_STEPS = 100
    obs_dim = 15

    def __init__(self):
        self.walls = np.array([[c == "#" for c in row] for row in PACMAN_MAZE]).T  # walls[x, y]
        self.size = self.walls.shape[0]
        self.mode = Mode.MATCH
        self.done = True
        self.t = 0
        self.agent = PACMAN_AGENT_START
        self.ghost = None
        self.pellets = np.ones(len(PACMAN_PELLETS), dtype=bool)

    def legal(self, pos):
        return [m for m in range(4) if not self.walls[pos[0] + self.MOVES[m][0], pos[1] + self.MOVES[m][1]]]

    def _move(self, pos, m):
        nxt = (pos[0] + self.MOVES[m][0], pos[1] + self.MOVES[m][1])
        return pos if self.walls[nxt] else nxt

    def _distances(self, target):
        dist = {target: 0}
        queue = deque([target])
        while queue:
            p = queue.popleft()
            for m in self.legal(p):
                q = self._move(p, m)
                if q not in dist:
                    dist[q] = dist[p] + 1
                    queue.append(q)
        return dist

    def observe(self) -> Observation:
        n = self.size - 1
        ghost = (self.ghost[0] / n, self.ghost[1] / n) if self.ghost is not None else (-1.0, -1.0)
        f = [self.agent[0] / n, self.agent[1] / n, *ghost, *self.pellets.astype(float)]
        return _obs(f, self.mode)

    def reset(self, mode: Mode, rng: np.random.Generator) -> Observation:
        self.mode = Mode(mode)
        self.t = 0
        self.agent = PACMAN_AGENT_START
        self.ghost = PACMAN_GHOST_START if self.mode is Mode.MATCH else None
        self.pellets = np.ones(len(PACMAN_PELLETS), dtype=bool)
        self.done = False
        return self.observe()

    def _ghost_step(self, rng):
        moves = self.legal(self.ghost)
        if rng.random() < self.GHOST_CHASE_P:
            dist = self._distances(self.agent)
            best = min(dist[self._move(self.ghost, m)] for m in moves)
            moves = [m for m in moves if dist[self._move(self.ghost, m)] == best]
        self.ghost = self._move(self.ghost, moves[int(rng.integers(len(moves)))])

    def step(self, action: int, rng: np.random.Generator) -> StepResult:
        if self.done:
            raise EpisodeDoneError("step() called on a finished episode")
        if action not in range(4):
            raise ValueError(f"invalid pacman action {action}")
        self.agent = self._move(self.agent, action)
        reward = 0.0
        for i, cell in enumerate(PACMAN_PELLETS):
            if self.pellets[i] and cell == self.agent:
                self.pellets[i] = False
                reward = 1.0
        self.t += 1
        caught = False
        if self.mode is Mode.MATCH:
            caught = self.ghost == self.agent
            if not caught:
                self._ghost_step(rng)
                caught = self.ghost == self.agent
            self.done = caught or not self.pellets.any() or self.t >= self.MATCH_MAX_STEPS
        else:
            reward = 0.0
            self.done = self.t >= self.PRACTICE_STEPS
        return StepResult(self.observe(), reward, self.done)

    def maze_string(self) -> str:
        rows = []
        for y in range(self.size):
            row = []
            for x in range(self.size):
                if self.walls[x, y]:
                    row.append("#")
                elif (x, y) == PACMAN_AGENT_START:
                    row.append("P")
                elif (x, y) == PACMAN_GHOST_START:
                    row.append("G")
                elif (x, y) in PACMAN_PELLETS:
                    row.append("o")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows)

    def describe(self) -> str:
        return ("minipacman: 8x8 maze (# wall, o pellet, P agent start, G ghost start), actions "
                "Up/Down/Left/Right.\nmatch: one ghost steps toward the agent with p=0.5, else a random "
                "legal move; +1 per pellet; ends on capture, all pellets eaten or 200 steps.\n"
                "practice: same maze and pellets, no ghost, 100 steps, no extrinsic reward.\n"
                "features [agent_x, agent_y, ghost_x, ghost_y (-1,-1 when absent), 10 pellet bits, mode]\n"
                + self.maze_string())


ENVIRONMENTS = {"corridor": Corridor, "minipong": MiniPong, "minipacman": MiniPacMan}


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)
