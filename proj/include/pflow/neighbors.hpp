#pragma once

// Exact k-nearest-neighbour search over the joint (x_n, mu) space.
//
// Every axis is divided by its own scale before distances are taken, so with
// scales (nu_x, ..., nu_mu, ...) the ranking agrees with the Gaussian kernels
// used by the score estimator. Ties in distance go to the lower record index.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "pflow/errors.hpp"
#include "pflow/simulate.hpp"

namespace pflow {

struct Neighbor {
    double dist2 = 0.0;  // squared scaled distance
    std::size_t index = 0;

    friend bool operator<(const Neighbor& a, const Neighbor& b)
    {
        return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
    }
    friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Per-axis scales: nu_x on the d state axes, nu_mu on the d_mu parameter axes.
inline std::vector<double> joint_axis_scales(std::size_t d, std::size_t d_mu, double nu_x, double nu_mu)
{
    std::vector<double> s(d + d_mu, nu_x);
    std::fill(s.begin() + static_cast<std::ptrdiff_t>(d), s.end(), nu_mu);
    return s;
}

class NeighborIndex {
public:
    static constexpr std::size_t kLeafSize = 16;

    NeighborIndex(const ObservedDataset& ds, std::vector<double> axis_scales)
        : d_(ds.d()), d_mu_(ds.d_mu()), dims_(ds.d() + ds.d_mu()), scales_(std::move(axis_scales))
    {
        detail::require(!ds.empty(), "build_index: dataset is empty");
        detail::require(scales_.size() == dims_, "build_index: need one scale per joint axis");
        for (const double s : scales_) detail::require(s > 0.0 && std::isfinite(s), "build_index: scales must be positive");

        const std::size_t n = ds.size();
        std::vector<double> coords(n * dims_);
        for (std::size_t j = 0; j < n; ++j) {
            const auto rec = ds.record(j);
            for (std::size_t a = 0; a < d_; ++a) coords[j * dims_ + a] = rec.x_n[a] / scales_[a];
            for (std::size_t a = 0; a < d_mu_; ++a) coords[j * dims_ + d_ + a] = rec.mu[a] / scales_[d_ + a];
        }
        order_.resize(n);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        nodes_.reserve(2 * n / kLeafSize + 2);
        build_node(coords, 0, n);

        // Store points contiguously in tree order.
        points_.resize(n * dims_);
        for (std::size_t p = 0; p < n; ++p)
            std::copy_n(coords.begin() + static_cast<std::ptrdiff_t>(order_[p] * dims_), dims_, points_.begin() + static_cast<std::ptrdiff_t>(p * dims_));
    }

    std::size_t size() const { return order_.size(); }
    std::size_t dims() const { return dims_; }
    const std::vector<double>& axis_scales() const { return scales_; }

    /// Scaled joint coordinates of a query.
    std::vector<double> scale_query(std::span<const double> x, std::span<const double> mu) const
    {
        detail::require(x.size() == d_ && mu.size() == d_mu_, "k_nearest: query has wrong shape");
        std::vector<double> q(dims_);
        for (std::size_t a = 0; a < d_; ++a) q[a] = x[a] / scales_[a];
        for (std::size_t a = 0; a < d_mu_; ++a) q[d_ + a] = mu[a] / scales_[d_ + a];
        return q;
    }

    /// The min(k, size()) nearest records, sorted by (distance, index).
    std::vector<Neighbor> k_nearest_with_distance(std::span<const double> x, std::span<const double> mu, std::size_t k) const
    {
        detail::require(k >= 1, "k_nearest: k must be at least 1");
        const std::vector<double> q = scale_query(x, mu);
        k = std::min(k, size());
        std::vector<Neighbor> heap;
        heap.reserve(k + 1);
        search(0, q, k, heap);
        std::sort_heap(heap.begin(), heap.end());
        return heap;
    }

    std::vector<std::size_t> k_nearest(std::span<const double> x, std::span<const double> mu, std::size_t k) const
    {
        const auto found = k_nearest_with_distance(x, mu, k);
        std::vector<std::size_t> out(found.size());
        std::transform(found.begin(), found.end(), out.begin(), [](const Neighbor& nb) { return nb.index; });
        return out;
    }

    std::vector<std::size_t> k_nearest(const Vector& x, const Vector& mu, std::size_t k) const
    {
        return k_nearest(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
                         std::span<const double>(mu.data(), static_cast<std::size_t>(mu.size())), k);
    }

private:
    struct Node {
        std::size_t begin = 0;
        std::size_t end = 0;
        std::size_t left = 0;  // 0 marks a leaf; the root is never a child
        std::size_t right = 0;
        std::size_t axis = 0;
        double split = 0.0;
    };

    std::size_t build_node(const std::vector<double>& coords, std::size_t begin, std::size_t end)
    {
        const std::size_t id = nodes_.size();
        nodes_.push_back({begin, end, 0, 0, 0, 0.0});
        if (end - begin <= kLeafSize) return id;

        // Split on the axis of largest spread at the median.
        std::size_t axis = 0;
        double best_spread = -1.0;
        for (std::size_t a = 0; a < dims_; ++a) {
            double lo = coords[order_[begin] * dims_ + a];
            double hi = lo;
            for (std::size_t p = begin + 1; p < end; ++p) {
                const double v = coords[order_[p] * dims_ + a];
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (hi - lo > best_spread) {
                best_spread = hi - lo;
                axis = a;
            }
        }
        if (best_spread <= 0.0) return id;  // all points coincide

        const std::size_t mid = begin + (end - begin) / 2;
        auto first = order_.begin() + static_cast<std::ptrdiff_t>(begin);
        std::nth_element(first, order_.begin() + static_cast<std::ptrdiff_t>(mid), order_.begin() + static_cast<std::ptrdiff_t>(end),
                         [&](std::size_t i, std::size_t j) { return coords[i * dims_ + axis] < coords[j * dims_ + axis]; });
        const double split = coords[order_[mid] * dims_ + axis];

        const std::size_t left = build_node(coords, begin, mid);
        const std::size_t right = build_node(coords, mid, end);
        nodes_[id].left = left;
        nodes_[id].right = right;
        nodes_[id].axis = axis;
        nodes_[id].split = split;
        return id;
    }

    // Max-heap on (dist2, index) holding the best k candidates so far.
    void search(std::size_t id, const std::vector<double>& q, std::size_t k, std::vector<Neighbor>& heap) const
    {
        const Node& node = nodes_[id];
        if (node.left == 0) {
            for (std::size_t p = node.begin; p < node.end; ++p) {
                const double* pt = points_.data() + p * dims_;
                double d2 = 0.0;
                for (std::size_t a = 0; a < dims_; ++a) {
                    const double diff = q[a] - pt[a];
                    d2 += diff * diff;
                }
                const Neighbor cand{d2, order_[p]};
                if (heap.size() < k) {
                    heap.push_back(cand);
                    std::push_heap(heap.begin(), heap.end());
                } else if (cand < heap.front()) {
                    std::pop_heap(heap.begin(), heap.end());
                    heap.back() = cand;
                    std::push_heap(heap.begin(), heap.end());
                }
            }
            return;
        }
        const double diff = q[node.axis] - node.split;
        const std::size_t near = diff < 0.0 ? node.left : node.right;
        const std::size_t far = diff < 0.0 ? node.right : node.left;
        search(near, q, k, heap);
        // <= keeps equal-distance candidates with a lower index reachable.
        if (heap.size() < k || diff * diff <= heap.front().dist2) search(far, q, k, heap);
    }

    std::size_t d_;
    std::size_t d_mu_;
    std::size_t dims_;
    std::vector<double> scales_;
    std::vector<std::size_t> order_;  // tree position -> record index
    std::vector<double> points_;      // scaled coordinates in tree order
    std::vector<Node> nodes_;
};

inline NeighborIndex build_index(const ObservedDataset& ds, std::vector<double> axis_scales)
{
    return NeighborIndex(ds, std::move(axis_scales));
}

inline NeighborIndex build_index(const ObservedDataset& ds, double nu_x, double nu_mu)
{
    return NeighborIndex(ds, joint_axis_scales(ds.d(), ds.d_mu(), nu_x, nu_mu));
}

}  // namespace pflow
