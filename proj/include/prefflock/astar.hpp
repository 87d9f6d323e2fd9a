#pragma once

#include "prefflock/world.hpp"

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <queue>
#include <stdexcept>
#include <vector>

namespace prefflock {

struct PlanError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline int manhattan(const Cell &a, const Cell &b) {
    return std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.z - b.z);
}

inline constexpr std::array<std::array<int, 3>, 6> kSixNeighbours{
    {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};

/// A* over 6-connected free cells with unit step cost. The returned path
/// includes start and goal; its length in moves is path.size() - 1.
inline std::vector<Cell> plan_path(const OccupancyGrid &g, const Cell &start, const Cell &goal) {
    if (!g.is_free(start)) throw PlanError("start cell is occupied or out of range");
    if (!g.is_free(goal)) throw PlanError("goal cell is occupied or out of range");
    const std::size_t n = g.size();
    std::vector<int> cost(n, -1);
    std::vector<std::size_t> parent(n, n);
    std::vector<std::uint8_t> closed(n, 0);
    struct Node {
        int f, h;
        std::size_t idx;
        bool operator>(const Node &o) const {
            if (f != o.f) return f > o.f;
            if (h != o.h) return h > o.h;
            return idx > o.idx;
        }
    };
    std::priority_queue<Node, std::vector<Node>, std::greater<>> open;
    const std::size_t s = g.index(start), t = g.index(goal);
    cost[s] = 0;
    open.push({manhattan(start, goal), manhattan(start, goal), s});
    while (!open.empty()) {
        const Node cur = open.top();
        open.pop();
        if (closed[cur.idx]) continue;
        closed[cur.idx] = 1;
        if (cur.idx == t) break;
        const Cell c = g.cell_of_index(cur.idx);
        for (const auto &d : kSixNeighbours) {
            const Cell nb{c.x + d[0], c.y + d[1], c.z + d[2]};
            if (!g.is_free(nb)) continue;
            const std::size_t ni = g.index(nb);
            const int nc = cost[cur.idx] + 1;
            if (closed[ni] || (cost[ni] >= 0 && cost[ni] <= nc)) continue;
            cost[ni] = nc;
            parent[ni] = cur.idx;
            const int h = manhattan(nb, goal);
            open.push({nc + h, h, ni});
        }
    }
    if (cost[t] < 0) throw PlanError("goal unreachable");
    std::vector<Cell> path;
    for (std::size_t i = t; i != n; i = parent[i]) path.push_back(g.cell_of_index(i));
    std::reverse(path.begin(), path.end());
    return path;
}

/// Nearest free cell by breadth-first search, for snapping start/goal points
/// that land in inflated cells.
inline std::optional<Cell> nearest_free(const OccupancyGrid &g, const Cell &from) {
    if (g.is_free(from)) return from;
    std::vector<std::uint8_t> seen(g.size(), 0);
    std::queue<Cell> q;
    q.push(from);
    seen[g.index(from)] = 1;
    while (!q.empty()) {
        const Cell c = q.front();
        q.pop();
        for (const auto &d : kSixNeighbours) {
            const Cell nb{c.x + d[0], c.y + d[1], c.z + d[2]};
            if (!g.in_range(nb) || seen[g.index(nb)]) continue;
            if (!g.is_occupied(nb)) return nb;
            seen[g.index(nb)] = 1;
            q.push(nb);
        }
    }
    return std::nullopt;
}

}  // namespace prefflock
