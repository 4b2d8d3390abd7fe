"""Decentralized system manager: peer states, groups, and the merge handshake.

Every agent keeps a replica of the pair-state table and the group partition,
updated only through protocol messages and reachability events, so the
cluster has no shared state.  The closure invariant ties the two views
together: a pair is in the merged state (or its localization-lost variant)
exactly when both agents sit in the same group.

Merge handshake, driven by bag-of-words announcements between group leaders:

* a leader that detects a merge candidate in an announcement from a
  higher-id leader sends its own full map to that leader;
* a leader that detects one from a lower-id leader cannot push its map
  (full maps always flow lower to higher), so it answers with a targeted
  announcement of its best matching keyframe, which lets the lower leader
  detect the overlap and start the exchange from its side;
* the higher leader fits a similarity transform from word-matched map point
  correspondences, applies it to its own group's maps, tells its old group
  members to do the same, and broadcasts the new roster.

A handshake that loses its full map to the network times out and the pair
returns to unmerged; the next announcement retries it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .alignment import NoModelError, RansacParams, ransac_sim3
from .geometry import Sim3Transform
from .map_store import AgentMap
from .merge_detection import detect_merge
from .wire import (
    BowAnnounce,
    FullMapMsg,
    GroupUpdate,
    LocalizationLost,
    LocalizationRegained,
    MapPointRecord,
    MergeNotify,
)


class PeerState(Enum):
    UNMERGED = "unmerged"
    MERGE_IN_PROGRESS = "merge_in_progress"
    MERGED = "merged"
    PEER_UNREACHABLE = "peer_unreachable"
    PEER_LOCALIZATION_LOST = "peer_localization_lost"


# states in which the pair shares a coordinate frame
FRAME_SHARING_STATES = (PeerState.MERGED, PeerState.PEER_LOCALIZATION_LOST)


def leader(group) -> int:
    """Lowest agent id in the group."""
    if not group:
        raise ValueError("empty group has no leader")
    return min(group)


def _pair(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class PeerStateTable:
    """Symmetric pair-state map over all unordered agent pairs."""

    def __init__(self, agents: list[int]):
        self.agents = sorted(agents)
        self.states: dict[tuple[int, int], PeerState] = {}
        self.aligned: dict[tuple[int, int], bool] = {}
        for i, a in enumerate(self.agents):
            for b in self.agents[i + 1:]:
                self.states[(a, b)] = PeerState.UNMERGED
                self.aligned[(a, b)] = False

    def get(self, a: int, b: int) -> PeerState:
        return self.states[_pair(a, b)]

    def set(self, a: int, b: int, state: PeerState) -> None:
        self.states[_pair(a, b)] = state

    def is_aligned(self, a: int, b: int) -> bool:
        return self.aligned[_pair(a, b)]

    def set_aligned(self, a: int, b: int, flag: bool) -> None:
        self.aligned[_pair(a, b)] = flag

    def pairs_with(self, agent: int) -> list[tuple[int, int]]:
        return [p for p in self.states if agent in p]


class GroupRegistry:
    """Partition of all agents into groups; leaders are minimum ids."""

    def __init__(self, agents: list[int]):
        self.agents = sorted(agents)
        self._groups: list[set[int]] = [{a} for a in self.agents]

    def groups(self) -> list[frozenset[int]]:
        return [frozenset(g) for g in sorted(self._groups, key=min)]

    def group_of(self, agent: int) -> frozenset[int]:
        for g in self._groups:
            if agent in g:
                return frozenset(g)
        raise KeyError(f"agent {agent} not in registry")

    def leader_of(self, agent: int) -> int:
        return leader(self.group_of(agent))

    def leaders(self) -> list[int]:
        return sorted(min(g) for g in self._groups)

    def assign_roster(self, roster) -> None:
        """Make `roster` a group, pulling its members out of their old groups."""
        roster = set(roster)
        kept = []
        for g in self._groups:
            remainder = g - roster
            if remainder:
                kept.append(remainder)
        kept.append(roster)
        self._groups = sorted(kept, key=min)

    def set_partition(self, groups: list[set[int]]) -> None:
        covered = set()
        for g in groups:
            covered |= g
        if covered != set(self.agents):
            raise ValueError("partition must cover all agents exactly")
        self._groups = sorted((set(g) for g in groups), key=min)


def apply_group_merge(
    registry: GroupRegistry,
    table: PeerStateTable,
    group_n,
    group_m,
    lost: frozenset[int] = frozenset(),
) -> tuple[list[int], int]:
    """Union two groups: cross pairs become merged, leader is the minimum id.

    Returns (sorted roster, leader).  Merging a group with itself is a no-op.
    """
    group_n, group_m = set(group_n), set(group_m)
    if group_n == group_m:
        roster = sorted(group_n)
        return roster, leader(roster)
    for a in sorted(group_n):
        for b in sorted(group_m):
            state = (PeerState.PEER_LOCALIZATION_LOST
                     if (a in lost or b in lost) else PeerState.MERGED)
            table.set(a, b, state)
            table.set_aligned(a, b, True)
    roster = sorted(group_n | group_m)
    registry.assign_roster(roster)
    return roster, leader(roster)


# ---------------------------------------------------------------------------
# Geometric merge attempt
# ---------------------------------------------------------------------------

def points_by_word_from_map(m: AgentMap, point_ids=None) -> dict[int, list[tuple[int, np.ndarray]]]:
    out: dict[int, list[tuple[int, np.ndarray]]] = {}
    ids = sorted(point_ids) if point_ids is not None else sorted(m.points)
    for pid in ids:
        p = m.points.get(pid)
        if p is not None:
            out.setdefault(p.word, []).append((pid, p.position))
    return out


def points_by_word_from_records(records: list[MapPointRecord]) -> dict[int, list[tuple[int, np.ndarray]]]:
    out: dict[int, list[tuple[int, np.ndarray]]] = {}
    for rec in sorted(records, key=lambda r: r.uuid):
        out.setdefault(rec.word, []).append((rec.uuid, np.asarray(rec.position, dtype=float)))
    return out


def _word_representative(points: list[tuple[int, np.ndarray]],
                         cluster_tol: float) -> np.ndarray | None:
    """Single position standing for all of a word's points, or None.

    One point is unambiguous.  Several points still qualify when they sit
    within `cluster_tol` of each other: that is what unmerged duplicate
    copies of the same landmark look like, and the lowest-id copy stands in
    deterministically.  Genuinely distinct landmarks sharing a word are
    spread apart and disqualify the word.
    """
    if len(points) == 1:
        return points[0][1]
    positions = np.array([p for _, p in points])
    spread = np.max(np.linalg.norm(positions - positions[0], axis=1))
    if spread <= cluster_tol:
        return min(points, key=lambda up: up[0])[1]
    return None


def collect_word_correspondences(
    local_by_word: dict[int, list[tuple[int, np.ndarray]]],
    remote_by_word: dict[int, list[tuple[int, np.ndarray]]],
    cluster_tol: float = 0.15,
) -> tuple[list[tuple[int, np.ndarray]], list[tuple[int, np.ndarray]]]:
    """Pair points through word ids that are unambiguous on both sides.

    Ambiguous words (several well-separated points on a side) are skipped:
    without a transform there is no way to tell them apart, and RANSAC only
    has to reject what little ambiguity survives.
    """
    src, dst = [], []
    idx = 0
    for word in sorted(set(local_by_word) & set(remote_by_word)):
        lrep = _word_representative(local_by_word[word], cluster_tol)
        rrep = _word_representative(remote_by_word[word], cluster_tol)
        if lrep is not None and rrep is not None:
            src.append((idx, lrep))
            dst.append((idx, rrep))
            idx += 1
    return src, dst


def attempt_full_merge(
    local_map: AgentMap,
    hint_kf_id: int,
    remote_by_word: dict[int, list[tuple[int, np.ndarray]]],
    neighborhood_depth: int,
    ransac: RansacParams,
    cluster_tol: float = 0.15,
) -> tuple[Sim3Transform, int] | None:
    """Fit the transform taking the local frame onto the remote frame.

    Correspondences come from the covisibility neighborhood of the hint
    keyframe against the whole remote map, matched by unambiguous word ids.
    Returns (transform, inlier count), or None when no trustworthy model
    exists.
    """
    if hint_kf_id not in local_map.keyframes:
        return None
    kf_ids = local_map.covisibility_neighborhood(hint_kf_id, neighborhood_depth)
    point_ids: set[int] = set()
    for kid in kf_ids:
        point_ids |= local_map.keyframes[kid].observed_points
    local_by_word = points_by_word_from_map(local_map, point_ids)
    src, dst = collect_word_correspondences(local_by_word, remote_by_word, cluster_tol)
    if len(src) < 3:
        return None
    try:
        transform, inliers = ransac_sim3(src, dst, ransac)
    except NoModelError:
        return None
    return transform, len(inliers)


# ---------------------------------------------------------------------------
# The per-agent manager
# ---------------------------------------------------------------------------

@dataclass
class ManagerHooks:
    send: Callable[[int, object], None]      # (dst, message dataclass)
    log: Callable[..., None]                 # (event, **detail)
    now: Callable[[], float]
    schedule: Callable[[float, Callable[[], None]], None]
    apply_map_transform: Callable[[Sim3Transform], None]
    serialize_shared_map: Callable[[], tuple[list, list]]  # keyframe/point records
    ransac_seed: Callable[[], int]
    # called with agents that newly joined this agent's group, so the owner
    # can queue its map history toward them (the full map exchange only
    # moved the lower leader's map one way)
    on_peers_merged: Callable[[list[int]], None] = lambda peers: None


class SystemManager:
    def __init__(self, agent_id: int, agents: list[int], hooks: ManagerHooks,
                 acceptance_factor: float, min_inliers: int,
                 neighborhood_depth: int, handshake_timeout: float,
                 ransac_iterations: int, ransac_threshold: float,
                 shared_map: Callable[[], AgentMap],
                 notify_repeats: int = 3, notify_spacing: float = 0.4,
                 cluster_tolerance: float = 0.15):
        self.agent_id = agent_id
        self.agents = sorted(agents)
        self.hooks = hooks
        self.acceptance_factor = acceptance_factor
        self.min_inliers = min_inliers
        self.neighborhood_depth = neighborhood_depth
        self.handshake_timeout = handshake_timeout
        self.ransac_iterations = ransac_iterations
        self.ransac_threshold = ransac_threshold
        self.shared_map = shared_map
        self.notify_repeats = notify_repeats
        self.notify_spacing = notify_spacing
        self.cluster_tolerance = cluster_tolerance
        self.registry = GroupRegistry(self.agents)
        self.table = PeerStateTable(self.agents)
        self.lost_agents: set[int] = set()
        self._handshake_epoch: dict[tuple[int, int], int] = {}
        self._merge_counter = 0
        self._applied_merge_ids: set[int] = set()

    # -- views -----------------------------------------------------------

    @property
    def self_lost(self) -> bool:
        return self.agent_id in self.lost_agents

    def is_leader(self) -> bool:
        return self.registry.leader_of(self.agent_id) == self.agent_id

    def other_leaders(self) -> list[int]:
        own = self.registry.group_of(self.agent_id)
        return [l for l in self.registry.leaders() if l not in own]

    def frame_aligned_peers(self) -> list[int]:
        """Peers whose maps share this agent's frame (backlogs keep growing)."""
        out = []
        for a, b in sorted(self.table.pairs_with(self.agent_id)):
            peer = b if a == self.agent_id else a
            if self.table.is_aligned(a, b):
                out.append(peer)
        return sorted(out)

    def merged_peers(self) -> list[int]:
        out = []
        for a, b in sorted(self.table.pairs_with(self.agent_id)):
            peer = b if a == self.agent_id else a
            if self.table.get(a, b) == PeerState.MERGED:
                out.append(peer)
        return sorted(out)

    def _ransac_params(self) -> RansacParams:
        return RansacParams(
            iterations=self.ransac_iterations,
            inlier_threshold=self.ransac_threshold,
            min_inliers=self.min_inliers,
            seed=self.hooks.ransac_seed(),
        )

    def _merge_busy(self) -> bool:
        """True while this agent has an outstanding merge handshake.

        A leader must not take part in two merges at once: completing one
        changes its coordinate frame and would invalidate the map already
        handed to the other peer.  Merge traffic is serialized per agent;
        the rejected side times out and retries on a later announcement.
        """
        return any(
            self.table.get(a, b) == PeerState.MERGE_IN_PROGRESS
            for a, b in self.table.pairs_with(self.agent_id)
        )

    # -- announcements ------------------------------------------------------

    def announce_keyframe_bow(self, kf_id: int, words: dict[int, float]) -> list[int]:
        """Send the keyframe's word histogram to every other group leader.

        Returns the recipients; empty when this agent is not a leader (merge
        traffic is delegated to leaders) or currently lost.
        """
        if not self.is_leader() or self.self_lost:
            return []
        recipients = self.other_leaders()
        for dst in recipients:
            self.hooks.send(dst, BowAnnounce(self.agent_id, kf_id, dict(words)))
        return recipients

    def on_bow_announce(self, msg: BowAnnounce) -> None:
        sender = msg.sender
        if sender == self.agent_id or not self.is_leader() or self.self_lost:
            return
        if sender in self.registry.group_of(self.agent_id):
            return
        state = self.table.get(self.agent_id, sender)
        if state != PeerState.UNMERGED or self._merge_busy():
            return  # handshake running, already merged, or peer unavailable
        cand = detect_merge(self.shared_map(), msg.words,
                            self.acceptance_factor, sender)
        if cand is None:
            return
        self.hooks.log("merge_detected", peer=sender, score=cand.score,
                       baseline=cand.baseline, best_kf=str(cand.best_match_kf))
        if self.agent_id < sender:
            self._start_full_map_exchange(sender, hint_kf=msg.kf_id)
        else:
            # cannot push a full map uphill; answer with the overlapping
            # keyframe so the lower leader can detect and initiate
            best = self.shared_map().keyframes[cand.best_match_kf]
            self.hooks.send(sender, BowAnnounce(self.agent_id, best.id, dict(best.words)))

    def _start_full_map_exchange(self, peer: int, hint_kf: int) -> None:
        self.table.set(self.agent_id, peer, PeerState.MERGE_IN_PROGRESS)
        key = _pair(self.agent_id, peer)
        self._handshake_epoch[key] = self._handshake_epoch.get(key, 0) + 1
        epoch = self._handshake_epoch[key]

        def expire():
            if (self._handshake_epoch.get(key) == epoch
                    and self.table.get(*key) == PeerState.MERGE_IN_PROGRESS):
                self.table.set(*key, PeerState.UNMERGED)
                self.hooks.log("merge_handshake_timeout", peer=peer)

        self.hooks.schedule(self.handshake_timeout, expire)
        kfs, points = self.hooks.serialize_shared_map()
        self.hooks.send(peer, FullMapMsg(self.agent_id, hint_kf, kfs, points))
        self.hooks.log("full_map_sent", peer=peer, keyframes=len(kfs))

    # -- full map reception (the higher-id leader merges) ---------------------

    def on_full_map(self, msg) -> None:
        sender = msg.sender
        if not self.is_leader() or self.self_lost:
            return
        if sender in self.registry.group_of(self.agent_id):
            return
        if self.table.get(self.agent_id, sender) == PeerState.MERGED:
            return
        if self._merge_busy():
            return  # serialized at the leader; the sender times out and retries
        result = attempt_full_merge(
            self.shared_map(), msg.hint_kf,
            points_by_word_from_records(msg.points),
            self.neighborhood_depth, self._ransac_params(),
            self.cluster_tolerance,
        )
        if result is None:
            self.table.set(self.agent_id, sender, PeerState.UNMERGED)
            self.hooks.log("merge_attempt_failed", peer=sender)
            return
        transform, inlier_count = result
        self.complete_group_merge(sender, transform, inlier_count)

    def complete_group_merge(self, lower_leader: int, transform: Sim3Transform,
                             inlier_count: int) -> None:
        old_group = sorted(self.registry.group_of(self.agent_id))
        other_group = self.registry.group_of(lower_leader)
        self.hooks.apply_map_transform(transform)
        roster, new_leader = apply_group_merge(
            self.registry, self.table, old_group, other_group,
            lost=frozenset(self.lost_agents),
        )
        self.hooks.on_peers_merged(sorted(set(roster) - set(old_group)))
        self._merge_counter += 1
        merge_id = (self.agent_id << 32) | self._merge_counter
        self._applied_merge_ids.add(merge_id)
        notice = MergeNotify(self.agent_id, transform, roster, old_group, merge_id)
        members = sorted(set(old_group) - {self.agent_id}) + [lower_leader]
        update = GroupUpdate(self.agent_id, roster, new_leader)

        def broadcast():
            for member in members:
                self.hooks.send(member, notice)
            for dst in self.agents:
                if dst != self.agent_id:
                    self.hooks.send(dst, update)

        # the notice carries the frame change; losing every copy would leave
        # a member permanently misaligned, so it is repeated a few times and
        # receivers deduplicate on the merge id
        broadcast()
        for k in range(1, max(1, self.notify_repeats)):
            self.hooks.schedule(k * self.notify_spacing, broadcast)
        self.hooks.log("group_merged", roster=roster, leader=new_leader,
                       inliers=inlier_count, scale=transform.scale)

    def on_merge_notify(self, msg: MergeNotify) -> None:
        if msg.merge_id not in self._applied_merge_ids:
            self._applied_merge_ids.add(msg.merge_id)
            if self.agent_id in msg.transform_roster and self.agent_id != msg.sender:
                self.hooks.apply_map_transform(msg.transform)
                self.hooks.log("merge_transform_applied", source=msg.sender,
                               scale=msg.transform.scale)
        self._absorb_roster(msg.roster)

    def on_group_update(self, msg) -> None:
        self._absorb_roster(msg.roster)

    def _absorb_roster(self, roster) -> None:
        """Union the roster with every group it touches.

        Merges may race over the same agents; a roster computed from a stale
        replica must never split an already-larger group, so absorption only
        ever grows groups.  Splits happen exclusively through reachability.
        """
        before = self.registry.group_of(self.agent_id)
        union = set(roster)
        for g in self.registry.groups():
            if union & g:
                union |= g
        union_sorted = sorted(union)
        self.registry.assign_roster(union_sorted)
        for i, a in enumerate(union_sorted):
            for b in union_sorted[i + 1:]:
                state = (PeerState.PEER_LOCALIZATION_LOST
                         if (a in self.lost_agents or b in self.lost_agents)
                         else PeerState.MERGED)
                self.table.set(a, b, state)
                self.table.set_aligned(a, b, True)
        if self.agent_id in union:
            gained = sorted(union - set(before) - {self.agent_id})
            if gained:
                self.hooks.on_peers_merged(gained)

    # -- localization loss ------------------------------------------------------

    def declare_localization_lost(self) -> None:
        self.lost_agents.add(self.agent_id)
        self._mark_lost_pairs(self.agent_id)
        for dst in self.agents:
            if dst != self.agent_id:
                self.hooks.send(dst, LocalizationLost(self.agent_id))
        self.hooks.log("localization_lost")

    def declare_localization_regained(self) -> None:
        self.lost_agents.discard(self.agent_id)
        self._mark_regained_pairs(self.agent_id)
        for dst in self.agents:
            if dst != self.agent_id:
                self.hooks.send(dst, LocalizationRegained(self.agent_id))
        self.hooks.log("localization_regained")

    def on_loc_lost(self, msg) -> None:
        self.lost_agents.add(msg.sender)
        self._mark_lost_pairs(msg.sender)

    def on_loc_regained(self, msg) -> None:
        self.lost_agents.discard(msg.sender)
        self._mark_regained_pairs(msg.sender)

    def _mark_lost_pairs(self, agent: int) -> None:
        for a, b in sorted(self.table.pairs_with(agent)):
            if self.table.get(a, b) == PeerState.MERGED:
                self.table.set(a, b, PeerState.PEER_LOCALIZATION_LOST)

    def _mark_regained_pairs(self, agent: int) -> None:
        for a, b in sorted(self.table.pairs_with(agent)):
            if (self.table.get(a, b) == PeerState.PEER_LOCALIZATION_LOST
                    and a not in self.lost_agents and b not in self.lost_agents):
                self.table.set(a, b, PeerState.MERGED)

    # -- partitions ------------------------------------------------------------

    def on_partition_change(self, components: list[set[int]]) -> None:
        """Split groups along reachability; restore them when links return.

        Groups are recomputed as the connected components of the
        frame-aligned relation restricted to reachable pairs: fragments of a
        merged group re-form their group the moment they can talk again,
        with no new handshake.
        """
        comp_of: dict[int, int] = {}
        for i, comp in enumerate(components):
            for a in comp:
                comp_of[a] = i
        parent = {a: a for a in self.agents}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for (a, b), aligned in sorted(self.table.aligned.items()):
            if aligned and comp_of[a] == comp_of[b]:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        groups: dict[int, set[int]] = {}
        for a in self.agents:
            groups.setdefault(find(a), set()).add(a)
        self.registry.set_partition(list(groups.values()))

        for (a, b) in sorted(self.table.states):
            current = self.table.get(a, b)
            if comp_of[a] != comp_of[b]:
                self.table.set(a, b, PeerState.PEER_UNREACHABLE)
            elif find(a) == find(b):
                lost = a in self.lost_agents or b in self.lost_agents
                self.table.set(a, b, PeerState.PEER_LOCALIZATION_LOST if lost
                               else PeerState.MERGED)
            elif current in (PeerState.PEER_UNREACHABLE,
                             PeerState.MERGED,
                             PeerState.PEER_LOCALIZATION_LOST):
                self.table.set(a, b, PeerState.UNMERGED)
            # UNMERGED / MERGE_IN_PROGRESS between reachable agents persist

    # -- invariants (exercised by tests and debug runs) --------------------------

    def check_invariants(self) -> None:
        groups = self.registry.groups()
        seen: set[int] = set()
        for g in groups:
            assert not (seen & g), "groups overlap"
            seen |= g
        assert seen == set(self.agents), "groups must cover all agents"
        for (a, b), state in self.table.states.items():
            same_group = self.registry.group_of(a) == self.registry.group_of(b)
            sharing = state in FRAME_SHARING_STATES
            assert same_group == sharing, (
                f"closure violated at agent {self.agent_id}: pair ({a},{b}) "
                f"state={state.value} same_group={same_group}"
            )
        for g in groups:
            assert leader(g) == min(g)
