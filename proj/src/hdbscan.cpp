#include "dsvpr/hdbscan.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "dsvpr/errors.hpp"

namespace dsvpr {

namespace {

double dist(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

// Coincident points merge at distance zero; cap the density scale so their
// lambda stays finite.
double lambda_of(double w) { return 1.0 / std::max(w, 1e-12); }

struct MstEdge {
  double w;
  int u, v;  // normalized u < v
  bool operator<(const MstEdge& o) const {
    if (w != o.w) return w < o.w;
    if (u != o.u) return u < o.u;
    return v < o.v;
  }
};

struct DendroNode {
  int left = -1, right = -1;  // node ids; ids < n are single points
  double w = 0.0;
  int size = 1;
};

// One condensed-tree row: either a point or a child cluster leaving
// `parent` at density level `lambda`.
struct CondRow {
  int parent;
  int child_cluster;  // -1 when this row records a point
  int point;          // -1 when this row records a cluster
  double lambda;
  int size;
};

struct Dsu {
  std::vector<int> parent;
  explicit Dsu(int n) : parent(n) {
    for (int i = 0; i < n; ++i) parent[i] = i;
  }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
};

std::vector<int> subtree_points(const std::vector<DendroNode>& nodes, int node, int n) {
  std::vector<int> out, stack{node};
  while (!stack.empty()) {
    const int cur = stack.back();
    stack.pop_back();
    if (cur < n) {
      out.push_back(cur);
    } else {
      stack.push_back(nodes[static_cast<std::size_t>(cur)].left);
      stack.push_back(nodes[static_cast<std::size_t>(cur)].right);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

HdbscanResult hdbscan(const std::vector<std::array<double, 2>>& points, int min_cluster_size) {
  if (min_cluster_size < 2) throw ConfigError("hdbscan: min_cluster_size must be >= 2");
  const int n = static_cast<int>(points.size());
  HdbscanResult result;
  result.labels.assign(points.size(), -1);
  if (n < min_cluster_size) return result;

  // Core distance: distance to the k-th nearest neighbor counting the point
  // itself, k = min_cluster_size.
  std::vector<double> core(points.size());
  {
    std::vector<double> row(points.size());
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] = dist(points[i], points[j]);
      std::nth_element(row.begin(), row.begin() + (min_cluster_size - 1), row.end());
      core[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(min_cluster_size - 1)];
    }
  }

  // Prim over the implicit complete mutual-reachability graph.
  std::vector<MstEdge> edges;
  edges.reserve(points.size());
  {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<char> in_tree(points.size(), 0);
    std::vector<double> best(points.size(), kInf);
    std::vector<int> from(points.size(), -1);
    in_tree[0] = 1;
    int added = 0;
    int last = 0;
    while (added < n - 1) {
      for (int j = 0; j < n; ++j) {
        if (in_tree[static_cast<std::size_t>(j)]) continue;
        const double mr = std::max({core[static_cast<std::size_t>(last)],
                                    core[static_cast<std::size_t>(j)],
                                    dist(points[static_cast<std::size_t>(last)],
                                         points[static_cast<std::size_t>(j)])});
        if (mr < best[static_cast<std::size_t>(j)]) {
          best[static_cast<std::size_t>(j)] = mr;
          from[static_cast<std::size_t>(j)] = last;
        }
      }
      int pick = -1;
      for (int j = 0; j < n; ++j)
        if (!in_tree[static_cast<std::size_t>(j)] &&
            (pick < 0 || best[static_cast<std::size_t>(j)] < best[static_cast<std::size_t>(pick)]))
          pick = j;
      in_tree[static_cast<std::size_t>(pick)] = 1;
      const int a = std::min(pick, from[static_cast<std::size_t>(pick)]);
      const int b = std::max(pick, from[static_cast<std::size_t>(pick)]);
      edges.push_back({best[static_cast<std::size_t>(pick)], a, b});
      last = pick;
      ++added;
    }
  }
  std::sort(edges.begin(), edges.end());

  // Single-linkage dendrogram over the sorted tree edges.
  std::vector<DendroNode> nodes(points.size() * 2 - 1);
  {
    Dsu dsu(n);
    std::vector<int> set_node(points.size());  // current dendrogram node per set root
    for (int i = 0; i < n; ++i) set_node[static_cast<std::size_t>(i)] = i;
    int next = n;
    for (const auto& e : edges) {
      const int ra = dsu.find(e.u), rb = dsu.find(e.v);
      DendroNode nd;
      nd.left = set_node[static_cast<std::size_t>(ra)];
      nd.right = set_node[static_cast<std::size_t>(rb)];
      nd.w = e.w;
      nd.size = nodes[static_cast<std::size_t>(nd.left)].size +
                nodes[static_cast<std::size_t>(nd.right)].size;
      nodes[static_cast<std::size_t>(next)] = nd;
      dsu.parent[ra] = rb;
      set_node[static_cast<std::size_t>(dsu.find(rb))] = next;
      ++next;
    }
  }
  const int top = 2 * n - 2;

  // Condense: a side smaller than min_cluster_size sheds its points at the
  // split's lambda; only a split into two big sides creates new clusters.
  std::vector<CondRow> rows;
  std::vector<double> birth{0.0};        // birth lambda per condensed cluster
  std::vector<int> cparent{-1};          // condensed tree structure
  {
    struct Item {
      int node;
      int cluster;
    };
    std::vector<Item> stack{{top, 0}};
    while (!stack.empty()) {
      const auto [node, cluster] = stack.back();
      stack.pop_back();
      const auto& nd = nodes[static_cast<std::size_t>(node)];
      const double lam = lambda_of(nd.w);
      const int ls = nodes[static_cast<std::size_t>(nd.left)].size;
      const int rs = nodes[static_cast<std::size_t>(nd.right)].size;
      const bool lbig = ls >= min_cluster_size, rbig = rs >= min_cluster_size;
      if (lbig && rbig) {
        const int cl = static_cast<int>(birth.size());
        birth.push_back(lam);
        cparent.push_back(cluster);
        rows.push_back({cluster, cl, -1, lam, ls});
        const int cr = static_cast<int>(birth.size());
        birth.push_back(lam);
        cparent.push_back(cluster);
        rows.push_back({cluster, cr, -1, lam, rs});
        stack.push_back({nd.right, cr});
        stack.push_back({nd.left, cl});
      } else if (lbig || rbig) {
        const int big = lbig ? nd.left : nd.right;
        const int small = lbig ? nd.right : nd.left;
        for (int p : subtree_points(nodes, small, n)) rows.push_back({cluster, -1, p, lam, 1});
        stack.push_back({big, cluster});
      } else {
        for (int p : subtree_points(nodes, node, n)) rows.push_back({cluster, -1, p, lam, 1});
      }
    }
  }
  const int cluster_total = static_cast<int>(birth.size());

  std::vector<double> stability(static_cast<std::size_t>(cluster_total), 0.0);
  std::vector<std::vector<int>> children(static_cast<std::size_t>(cluster_total));
  for (const auto& r : rows) {
    stability[static_cast<std::size_t>(r.parent)] +=
        (r.lambda - birth[static_cast<std::size_t>(r.parent)]) * r.size;
    if (r.child_cluster >= 0)
      children[static_cast<std::size_t>(r.parent)].push_back(r.child_cluster);
  }

  // Excess of mass, bottom-up; a tie keeps the parent. Child ids are always
  // larger than their parent's, so descending id order is bottom-up.
  std::vector<double> value(static_cast<std::size_t>(cluster_total), 0.0);
  std::vector<char> flagged(static_cast<std::size_t>(cluster_total), 0);
  for (int c = cluster_total - 1; c >= 0; --c) {
    double child_sum = 0.0;
    for (int ch : children[static_cast<std::size_t>(c)])
      child_sum += value[static_cast<std::size_t>(ch)];
    if (children[static_cast<std::size_t>(c)].empty() ||
        stability[static_cast<std::size_t>(c)] >= child_sum) {
      flagged[static_cast<std::size_t>(c)] = 1;
      value[static_cast<std::size_t>(c)] = stability[static_cast<std::size_t>(c)];
    } else {
      value[static_cast<std::size_t>(c)] = child_sum;
    }
  }
  std::vector<char> selected(static_cast<std::size_t>(cluster_total), 0);
  {
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const int c = stack.back();
      stack.pop_back();
      if (flagged[static_cast<std::size_t>(c)]) {
        selected[static_cast<std::size_t>(c)] = 1;
      } else {
        for (int ch : children[static_cast<std::size_t>(c)]) stack.push_back(ch);
      }
    }
  }

  // Nearest selected ancestor-or-self per cluster (clusters are indexed in
  // top-down creation order, so parents resolve first).
  std::vector<int> nearest(static_cast<std::size_t>(cluster_total), -1);
  for (int c = 0; c < cluster_total; ++c) {
    if (selected[static_cast<std::size_t>(c)]) nearest[static_cast<std::size_t>(c)] = c;
    else if (cparent[static_cast<std::size_t>(c)] >= 0)
      nearest[static_cast<std::size_t>(c)] = nearest[static_cast<std::size_t>(cparent[static_cast<std::size_t>(c)])];
  }

  const bool root_selected = selected[0] != 0;
  double root_max_lambda = 0.0;
  if (root_selected)
    for (const auto& r : rows)
      if (r.parent == 0) root_max_lambda = std::max(root_max_lambda, r.lambda);

  std::vector<int> label_of(static_cast<std::size_t>(cluster_total), -1);
  {
    int next_label = 0;
    for (int c = 0; c < cluster_total; ++c)
      if (selected[static_cast<std::size_t>(c)]) label_of[static_cast<std::size_t>(c)] = next_label++;
    result.cluster_count = next_label;
  }

  for (const auto& r : rows) {
    if (r.point < 0) continue;
    const int home = nearest[static_cast<std::size_t>(r.parent)];
    if (home < 0) continue;
    if (home == 0 && root_selected) {
      // The root only counts as a real cluster for points that survive to
      // its final dissolution; earlier dropouts stay noise. The cutoff gets
      // a relative slack so geometrically tied distances that differ by a
      // few ulps (points on a circle, say) still count as surviving.
      if (r.lambda >= root_max_lambda * (1.0 - 1e-9))
        result.labels[static_cast<std::size_t>(r.point)] = label_of[0];
    } else {
      result.labels[static_cast<std::size_t>(r.point)] = label_of[static_cast<std::size_t>(home)];
    }
  }
  return result;
}

}  // namespace dsvpr
