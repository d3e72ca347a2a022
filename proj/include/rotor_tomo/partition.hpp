#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/operators.hpp"

namespace rotor_tomo {

/// Split of basis indices into invariant sectors (connected components of a coupling pattern).
/// Sectors are ordered by their smallest index; indices inside a sector are increasing.
class Partition {
 public:
  Partition() = default;

  /// Every index in its own sector.
  static Partition singletons(std::size_t dim) {
    Partition p;
    p.dim_ = dim;
    p.sector_of_.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      p.sectors_.push_back({static_cast<Eigen::Index>(i)});
      p.sector_of_[i] = i;
    }
    return p;
  }

  /// Explicit sectors; they must cover 0..dim-1 exactly once.
  static Partition from_sectors(std::size_t dim, std::vector<std::vector<Eigen::Index>> sectors) {
    Partition p;
    p.dim_ = dim;
    p.sector_of_.assign(dim, static_cast<std::size_t>(-1));
    for (std::size_t s = 0; s < sectors.size(); ++s) {
      for (auto i : sectors[s]) {
        if (i < 0 || static_cast<std::size_t>(i) >= dim || p.sector_of_[static_cast<std::size_t>(i)] != static_cast<std::size_t>(-1)) {
          throw InputError("sectors do not form a partition");
        }
        p.sector_of_[static_cast<std::size_t>(i)] = s;
      }
    }
    for (auto s : p.sector_of_) {
      if (s == static_cast<std::size_t>(-1)) throw InputError("sectors do not cover every index");
    }
    p.sectors_ = std::move(sectors);
    return p;
  }

  /// Builder accumulating couplings with union-find.
  class Builder {
   public:
    explicit Builder(std::size_t dim) : parent_(dim) { std::iota(parent_.begin(), parent_.end(), 0); }

    void couple(std::size_t a, std::size_t b) {
      a = root(a);
      b = root(b);
      if (a != b) parent_[std::max(a, b)] = std::min(a, b);
    }

    void add_pattern(const SparseMatrixC& m) {
      for (Eigen::Index k = 0; k < m.outerSize(); ++k) {
        for (SparseMatrixC::InnerIterator it(m, k); it; ++it) {
          couple(static_cast<std::size_t>(it.row()), static_cast<std::size_t>(it.col()));
        }
      }
    }

    void add_partition(const Partition& p) {
      if (p.dim() != parent_.size()) throw InputError("partition dimension mismatch");
      for (const auto& s : p.sectors()) {
        for (std::size_t i = 1; i < s.size(); ++i) couple(static_cast<std::size_t>(s[0]), static_cast<std::size_t>(s[i]));
      }
    }

    Partition build() {
      Partition p;
      p.dim_ = parent_.size();
      p.sector_of_.assign(p.dim_, 0);
      std::vector<std::size_t> label(p.dim_, static_cast<std::size_t>(-1));
      for (std::size_t i = 0; i < p.dim_; ++i) {
        const std::size_t r = root(i);
        if (label[r] == static_cast<std::size_t>(-1)) {
          label[r] = p.sectors_.size();
          p.sectors_.emplace_back();
        }
        p.sectors_[label[r]].push_back(static_cast<Eigen::Index>(i));
        p.sector_of_[i] = label[r];
      }
      return p;
    }

   private:
    std::size_t root(std::size_t a) {
      while (parent_[a] != a) {
        parent_[a] = parent_[parent_[a]];
        a = parent_[a];
      }
      return a;
    }
    std::vector<std::size_t> parent_;
  };

  std::size_t dim() const { return dim_; }
  std::size_t count() const { return sectors_.size(); }
  const std::vector<std::vector<Eigen::Index>>& sectors() const { return sectors_; }
  const std::vector<Eigen::Index>& sector(std::size_t s) const { return sectors_.at(s); }
  std::size_t sector_of(std::size_t index) const { return sector_of_.at(index); }

  /// True when every sector of `finer` lies inside one sector of this partition.
  bool coarsens(const Partition& finer) const {
    if (finer.dim() != dim_) return false;
    for (const auto& s : finer.sectors()) {
      const std::size_t target = sector_of_[static_cast<std::size_t>(s[0])];
      for (auto i : s) {
        if (sector_of_[static_cast<std::size_t>(i)] != target) return false;
      }
    }
    return true;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::vector<Eigen::Index>> sectors_;
  std::vector<std::size_t> sector_of_;
};

inline Eigen::VectorXcd gather(const Eigen::VectorXcd& v, const std::vector<Eigen::Index>& idx) {
  Eigen::VectorXcd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[idx[i]];
  return out;
}

inline void scatter_add(Eigen::VectorXcd& v, const std::vector<Eigen::Index>& idx, const Eigen::VectorXcd& part) {
  for (std::size_t i = 0; i < idx.size(); ++i) v[idx[i]] += part[static_cast<Eigen::Index>(i)];
}

/// Dense sub-block of a sparse matrix restricted to one index set.
inline Eigen::MatrixXcd restrict_to(const SparseMatrixC& m, const std::vector<Eigen::Index>& idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(n, n);
  std::vector<Eigen::Index> local(static_cast<std::size_t>(m.cols()), -1);
  for (Eigen::Index i = 0; i < n; ++i) local[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = i;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (SparseMatrixC::InnerIterator it(m, idx[static_cast<std::size_t>(i)]); it; ++it) {
      const Eigen::Index j = local[static_cast<std::size_t>(it.col())];
      if (j >= 0) out(i, j) = it.value();
    }
  }
  return out;
}

/// Block-diagonal matrix (up to permutation): one dense block per sector of a partition.
class BlockMatrix {
 public:
  BlockMatrix() = default;
  BlockMatrix(Partition partition, std::vector<Eigen::MatrixXcd> blocks)
      : partition_(std::move(partition)), blocks_(std::move(blocks)) {
    if (blocks_.size() != partition_.count()) throw InputError("block count does not match partition");
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const auto n = static_cast<Eigen::Index>(partition_.sector(s).size());
      if (blocks_[s].rows() != n || blocks_[s].cols() != n) throw InputError("block shape does not match sector");
    }
  }

  static BlockMatrix identity(const Partition& p) {
    std::vector<Eigen::MatrixXcd> b;
    for (const auto& s : p.sectors()) {
      const auto n = static_cast<Eigen::Index>(s.size());
      b.push_back(Eigen::MatrixXcd::Identity(n, n));
    }
    return BlockMatrix(p, std::move(b));
  }

  static BlockMatrix from_sparse(const SparseMatrixC& m, const Partition& p) {
    std::vector<Eigen::MatrixXcd> b;
    for (const auto& s : p.sectors()) b.push_back(restrict_to(m, s));
    return BlockMatrix(p, std::move(b));
  }

  static BlockMatrix diagonal(const Eigen::VectorXcd& d, const Partition& p) {
    std::vector<Eigen::MatrixXcd> b;
    for (const auto& s : p.sectors()) b.push_back(gather(d, s).asDiagonal());
    return BlockMatrix(p, std::move(b));
  }

  std::size_t dim() const { return partition_.dim(); }
  const Partition& partition() const { return partition_; }
  const Eigen::MatrixXcd& block(std::size_t s) const { return blocks_.at(s); }
  Eigen::MatrixXcd& block(std::size_t s) { return blocks_.at(s); }

  Eigen::VectorXcd apply(const Eigen::VectorXcd& x) const {
    Eigen::VectorXcd y = Eigen::VectorXcd::Zero(x.size());
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const auto& idx = partition_.sector(s);
      scatter_add(y, idx, blocks_[s] * gather(x, idx));
    }
    return y;
  }

  Eigen::VectorXcd apply_adjoint(const Eigen::VectorXcd& x) const {
    Eigen::VectorXcd y = Eigen::VectorXcd::Zero(x.size());
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const auto& idx = partition_.sector(s);
      scatter_add(y, idx, blocks_[s].adjoint() * gather(x, idx));
    }
    return y;
  }

  Eigen::MatrixXcd dense() const {
    const auto d = static_cast<Eigen::Index>(dim());
    Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(d, d);
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const auto& idx = partition_.sector(s);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < idx.size(); ++c) {
          out(idx[r], idx[c]) = blocks_[s](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        }
      }
    }
    return out;
  }

  /// Re-express on a coarser partition; entries between merged sectors are zero.
  BlockMatrix regroup(const Partition& coarse) const {
    if (!coarse.coarsens(partition_)) throw InputError("target partition does not coarsen the block structure");
    std::vector<Eigen::MatrixXcd> out;
    std::vector<Eigen::Index> local(dim(), -1);
    for (const auto& cs : coarse.sectors()) {
      const auto n = static_cast<Eigen::Index>(cs.size());
      out.push_back(Eigen::MatrixXcd::Zero(n, n));
      for (Eigen::Index i = 0; i < n; ++i) local[static_cast<std::size_t>(cs[static_cast<std::size_t>(i)])] = i;
    }
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const auto& idx = partition_.sector(s);
      const std::size_t target = coarse.sector_of(static_cast<std::size_t>(idx[0]));
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < idx.size(); ++c) {
          out[target](local[static_cast<std::size_t>(idx[r])], local[static_cast<std::size_t>(idx[c])]) =
              blocks_[s](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        }
      }
    }
    return BlockMatrix(coarse, std::move(out));
  }

  /// this * other; both must share the same partition.
  BlockMatrix operator*(const BlockMatrix& other) const {
    if (other.partition_.sectors() != partition_.sectors()) {
      throw InputError("block matrices live on different partitions");
    }
    std::vector<Eigen::MatrixXcd> out;
    out.reserve(blocks_.size());
    for (std::size_t s = 0; s < blocks_.size(); ++s) out.push_back(blocks_[s] * other.blocks_[s]);
    return BlockMatrix(partition_, std::move(out));
  }

 private:
  Partition partition_;
  std::vector<Eigen::MatrixXcd> blocks_;
};

}  // namespace rotor_tomo
