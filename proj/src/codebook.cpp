#include "sibow/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "sibow/errors.hpp"
#include "sibow/parallel.hpp"
#include "sibow/rng.hpp"
#include "sibow/serialize.hpp"

namespace sibow {

namespace {

constexpr Eigen::Index kAssignBlock = 4096;

struct BlockStats {
    std::vector<int> assignment;  // block-local
    MatrixRM sums;                // m x d weighted sums
    Eigen::VectorXd wsum;         // m
    std::vector<Eigen::Index> counts;
};

// Nearest-centroid assignment over a row range; ties go to the smaller index.
void assign_block(const MatrixRM& points, const Eigen::VectorXd& weights, const MatrixRM& centroids,
                  Eigen::Index begin, Eigen::Index end, BlockStats& out) {
    const Eigen::Index m = centroids.rows();
    const Eigen::Index d = centroids.cols();
    out.assignment.assign(static_cast<std::size_t>(end - begin), 0);
    out.sums = MatrixRM::Zero(m, d);
    out.wsum = Eigen::VectorXd::Zero(m);
    out.counts.assign(static_cast<std::size_t>(m), 0);

    const Eigen::VectorXd cnorm = centroids.rowwise().squaredNorm();
    const auto block = points.middleRows(begin, end - begin);
    const Eigen::MatrixXd dots = block * centroids.transpose();

    for (Eigen::Index i = 0; i < end - begin; ++i) {
        const double pnorm = block.row(i).squaredNorm();
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < m; ++j) {
            const double dist = pnorm - 2.0 * dots(i, j) + cnorm(j);
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<int>(j);
            }
        }
        out.assignment[static_cast<std::size_t>(i)] = best;
        const double w = weights(begin + i);
        out.sums.row(best) += w * block.row(i);
        out.wsum(best) += w;
        ++out.counts[static_cast<std::size_t>(best)];
    }
}

struct SingleRun {
    MatrixRM centroids;
    std::vector<int> assignment;
    double inertia = std::numeric_limits<double>::infinity();
    std::vector<double> trace;
};

MatrixRM kmeanspp_init(const MatrixRM& points, const Eigen::VectorXd& weights, int m,
                       std::mt19937_64& gen) {
    const Eigen::Index n = points.rows();
    MatrixRM centroids(m, points.cols());
    std::vector<char> chosen(static_cast<std::size_t>(n), 0);

    const Eigen::Index first = static_cast<Eigen::Index>(uniform_below(gen, static_cast<std::uint64_t>(n)));
    centroids.row(0) = points.row(first);
    chosen[static_cast<std::size_t>(first)] = 1;

    Eigen::VectorXd d2(n);
    for (Eigen::Index i = 0; i < n; ++i)
        d2(i) = (points.row(i) - centroids.row(0)).squaredNorm();

    for (int c = 1; c < m; ++c) {
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) total += weights(i) * d2(i);
        Eigen::Index pick = -1;
        if (total > 0) {
            const double u = uniform01(gen) * total;
            double cum = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                cum += weights(i) * d2(i);
                if (u < cum) {
                    pick = i;
                    break;
                }
            }
            if (pick < 0) {  // u landed on the accumulated rounding tail
                for (Eigen::Index i = n - 1; i >= 0; --i)
                    if (weights(i) * d2(i) > 0) {
                        pick = i;
                        break;
                    }
            }
        }
        if (pick < 0) {
            // All remaining mass sits on already-chosen values; take the first
            // row distinct from every centroid so far.
            for (Eigen::Index i = 0; i < n && pick < 0; ++i) {
                if (chosen[static_cast<std::size_t>(i)]) continue;
                bool distinct = true;
                for (int j = 0; j < c; ++j)
                    if (points.row(i) == centroids.row(j)) {
                        distinct = false;
                        break;
                    }
                if (distinct) pick = i;
            }
            if (pick < 0)
                throw DataError("kmeans: pool does not contain " + std::to_string(m) +
                                " distinct rows");
        }
        centroids.row(c) = points.row(pick);
        chosen[static_cast<std::size_t>(pick)] = 1;
        for (Eigen::Index i = 0; i < n; ++i)
            d2(i) = std::min(d2(i), (points.row(i) - centroids.row(c)).squaredNorm());
    }
    return centroids;
}

// Reseeds empty clusters to the unclaimed point farthest from the stale
// centroid, preferring values distinct from every current centroid.
void repair_empty_clusters(const MatrixRM& points, const Eigen::VectorXd& weights,
                           const MatrixRM& old_centroids, MatrixRM& sums, Eigen::VectorXd& wsum,
                           std::vector<Eigen::Index>& counts, std::vector<int>& assignment,
                           MatrixRM& new_centroids) {
    const Eigen::Index n = points.rows();
    const Eigen::Index m = new_centroids.rows();
    std::vector<char> claimed(static_cast<std::size_t>(n), 0);

    for (Eigen::Index j = 0; j < m; ++j) {
        if (counts[static_cast<std::size_t>(j)] > 0) continue;
        std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Eigen::VectorXd dist(n);
        for (Eigen::Index i = 0; i < n; ++i)
            dist(i) = (points.row(i) - old_centroids.row(j)).squaredNorm();
        std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
            if (dist(a) != dist(b)) return dist(a) > dist(b);
            return a < b;
        });

        Eigen::Index pick = -1;
        for (Eigen::Index cand : order) {
            if (claimed[static_cast<std::size_t>(cand)]) continue;
            const int src = assignment[static_cast<std::size_t>(cand)];
            if (counts[static_cast<std::size_t>(src)] <= 1) continue;  // would empty the donor
            bool distinct = true;
            for (Eigen::Index k = 0; k < m; ++k) {
                if (k == j || counts[static_cast<std::size_t>(k)] == 0) continue;
                if (points.row(cand) == new_centroids.row(k)) {
                    distinct = false;
                    break;
                }
            }
            if (distinct) {
                pick = cand;
                break;
            }
        }
        if (pick < 0) throw NumericError("kmeans: unable to repair empty cluster");

        const int src = assignment[static_cast<std::size_t>(pick)];
        const double w = weights(pick);
        sums.row(src) -= w * points.row(pick);
        wsum(src) -= w;
        --counts[static_cast<std::size_t>(src)];
        new_centroids.row(src) = sums.row(src) / wsum(src);

        assignment[static_cast<std::size_t>(pick)] = static_cast<int>(j);
        sums.row(j) = w * points.row(pick);
        wsum(j) = w;
        counts[static_cast<std::size_t>(j)] = 1;
        new_centroids.row(j) = points.row(pick);
        claimed[static_cast<std::size_t>(pick)] = 1;
    }
}

SingleRun lloyd_run(const MatrixRM& points, const Eigen::VectorXd& weights, int m,
                    const KMeansParams& params, std::uint64_t seed, int workers) {
    const Eigen::Index n = points.rows();
    std::mt19937_64 gen(seed);

    SingleRun run;
    run.centroids = kmeanspp_init(points, weights, m, gen);

    const Eigen::Index n_blocks = (n + kAssignBlock - 1) / kAssignBlock;
    std::vector<BlockStats> blocks(static_cast<std::size_t>(n_blocks));

    double prev_inertia = std::numeric_limits<double>::infinity();
    std::vector<int> assignment(static_cast<std::size_t>(n), 0);

    for (int iter = 0; iter < params.max_iters; ++iter) {
        parallel_for(static_cast<std::size_t>(n_blocks), workers, [&](std::size_t b) {
            const Eigen::Index begin = static_cast<Eigen::Index>(b) * kAssignBlock;
            const Eigen::Index end = std::min(begin + kAssignBlock, n);
            assign_block(points, weights, run.centroids, begin, end, blocks[b]);
        });

        // Deterministic merge in block order.
        MatrixRM sums = MatrixRM::Zero(m, points.cols());
        Eigen::VectorXd wsum = Eigen::VectorXd::Zero(m);
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(m), 0);
        for (Eigen::Index b = 0; b < n_blocks; ++b) {
            const BlockStats& blk = blocks[static_cast<std::size_t>(b)];
            sums += blk.sums;
            wsum += blk.wsum;
            for (Eigen::Index j = 0; j < m; ++j)
                counts[static_cast<std::size_t>(j)] += blk.counts[static_cast<std::size_t>(j)];
            const Eigen::Index begin = b * kAssignBlock;
            std::copy(blk.assignment.begin(), blk.assignment.end(),
                      assignment.begin() + begin);
        }

        MatrixRM new_centroids(m, points.cols());
        for (Eigen::Index j = 0; j < m; ++j) {
            if (counts[static_cast<std::size_t>(j)] > 0)
                new_centroids.row(j) = sums.row(j) / wsum(j);
            else
                new_centroids.row(j) = run.centroids.row(j);  // repaired below
        }
        if (std::any_of(counts.begin(), counts.end(), [](Eigen::Index c) { return c == 0; }))
            repair_empty_clusters(points, weights, run.centroids, sums, wsum, counts, assignment,
                                  new_centroids);

        // Inertia after the update, accumulated in fixed block order.
        std::vector<double> block_inertia(static_cast<std::size_t>(n_blocks), 0.0);
        parallel_for(static_cast<std::size_t>(n_blocks), workers, [&](std::size_t b) {
            const Eigen::Index begin = static_cast<Eigen::Index>(b) * kAssignBlock;
            const Eigen::Index end = std::min(begin + kAssignBlock, n);
            double acc = 0.0;
            for (Eigen::Index i = begin; i < end; ++i)
                acc += weights(i) *
                       (points.row(i) - new_centroids.row(assignment[static_cast<std::size_t>(i)]))
                           .squaredNorm();
            block_inertia[b] = acc;
        });
        double inertia = 0.0;
        for (double v : block_inertia) inertia += v;

        if (inertia > prev_inertia) break;  // round-off plateau: keep the previous state

        run.centroids = std::move(new_centroids);
        run.assignment = assignment;
        run.inertia = inertia;
        run.trace.push_back(inertia);

        if (prev_inertia != std::numeric_limits<double>::infinity()) {
            const double drop = prev_inertia - inertia;
            if (drop <= params.tol * prev_inertia) break;
        }
        if (inertia == 0.0) break;
        prev_inertia = inertia;
    }
    return run;
}

void check_distinct(const MatrixRM& centroids) {
    for (Eigen::Index a = 0; a < centroids.rows(); ++a)
        for (Eigen::Index b = a + 1; b < centroids.rows(); ++b)
            if (centroids.row(a) == centroids.row(b))
                throw NumericError("kmeans: identical centroids " + std::to_string(a) + " and " +
                                   std::to_string(b));
}

WeightedKMeansResult best_of_restarts(const MatrixRM& points, const Eigen::VectorXd& weights,
                                      int m, const KMeansParams& params, int workers) {
    if (m < 1) throw ConfigError("codebook size must be positive");
    if (points.rows() < m)
        throw DataError("kmeans: " + std::to_string(points.rows()) + " rows < " +
                        std::to_string(m) + " clusters");
    if (params.max_iters < 1 || params.n_init < 1 || params.tol < 0)
        throw ConfigError("invalid kmeans parameters");

    SingleRun best;
    for (int r = 0; r < params.n_init; ++r) {
        SingleRun run = lloyd_run(points, weights, m, params,
                                  params.seed + 1000003ull * static_cast<std::uint64_t>(r), workers);
        if (run.inertia < best.inertia) best = std::move(run);
    }
    check_distinct(best.centroids);

    WeightedKMeansResult res;
    res.centroids = std::move(best.centroids);
    res.assignment = std::move(best.assignment);
    res.inertia = best.inertia;
    res.inertia_trace = std::move(best.trace);
    return res;
}

}  // namespace

Pool build_pool(const std::vector<DescriptorSet>& sets) {
    Eigen::Index total = 0;
    for (const DescriptorSet& s : sets) total += static_cast<Eigen::Index>(s.descriptors.size());
    if (total == 0) throw DataError("empty descriptor pool: all descriptor sets are empty");

    Pool pool;
    pool.rows.resize(total, kDescriptorDim);
    Eigen::Index row = 0;
    for (const DescriptorSet& s : sets) {
        Pool::Provenance prov;
        prov.begin = row;
        prov.image_id = s.image_id;
        for (const Descriptor& d : s.descriptors) {
            for (int j = 0; j < kDescriptorDim; ++j) pool.rows(row, j) = d.values[static_cast<std::size_t>(j)];
            ++row;
        }
        prov.end = row;
        pool.provenance.push_back(std::move(prov));
    }
    return pool;
}

WeightedKMeansResult weighted_kmeans(const MatrixRM& points, const Eigen::VectorXd& weights,
                                     int m, const KMeansParams& params, int workers) {
    return best_of_restarts(points, weights, m, params, workers);
}

Codebook kmeans(const Pool& pool, int m, const KMeansParams& params, int workers) {
    const Eigen::VectorXd weights = Eigen::VectorXd::Ones(pool.rows.rows());
    WeightedKMeansResult res = best_of_restarts(pool.rows, weights, m, params, workers);

    Codebook book;
    book.centroids = std::move(res.centroids);
    book.passes_used = 1;
    book.seed = params.seed;
    book.inertia = res.inertia;
    return book;
}

Codebook multipass_kmeans(const Pool& pool, int m, const KMeansParams& params,
                          const MultipassOptions& options, int workers) {
    const Eigen::Index n = pool.rows.rows();
    if (n < m)
        throw DataError("kmeans: " + std::to_string(n) + " rows < " + std::to_string(m) +
                        " clusters");

    bool two_pass = options.pass == MultipassOptions::Pass::two ||
                    (options.pass == MultipassOptions::Pass::automatic && m > 128);
    Eigen::Index chunks = options.chunk_count_override > 0
                              ? options.chunk_count_override
                              : (n + options.chunk_rows - 1) / options.chunk_rows;
    chunks = std::min(chunks, n / m);  // every chunk must hold at least m rows
    if (chunks < 2) two_pass = false;

    if (!two_pass) return kmeans(pool, m, params, workers);

    // Random equal-size chunks.
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 gen(params.seed ^ 0x632be59bd9b4e019ull);
    shuffle(order, gen);

    MatrixRM stage(chunks * m, pool.rows.cols());
    Eigen::VectorXd stage_w(chunks * m);
    std::vector<std::pair<Eigen::Index, Eigen::Index>> ranges;
    for (Eigen::Index c = 0; c < chunks; ++c)
        ranges.emplace_back(c * n / chunks, (c + 1) * n / chunks);

    parallel_for(static_cast<std::size_t>(chunks), workers, [&](std::size_t c) {
        const auto [begin, end] = ranges[c];
        MatrixRM chunk_rows(end - begin, pool.rows.cols());
        for (Eigen::Index i = begin; i < end; ++i)
            chunk_rows.row(i - begin) = pool.rows.row(order[static_cast<std::size_t>(i)]);
        KMeansParams chunk_params = params;
        chunk_params.seed = params.seed + 7919ull * (static_cast<std::uint64_t>(c) + 1);
        const Eigen::VectorXd unit = Eigen::VectorXd::Ones(chunk_rows.rows());
        WeightedKMeansResult res = best_of_restarts(chunk_rows, unit, m, chunk_params, 1);

        std::vector<double> counts(static_cast<std::size_t>(m), 0.0);
        for (int a : res.assignment) counts[static_cast<std::size_t>(a)] += 1.0;
        for (int j = 0; j < m; ++j) {
            stage.row(static_cast<Eigen::Index>(c) * m + j) = res.centroids.row(j);
            stage_w(static_cast<Eigen::Index>(c) * m + j) = counts[static_cast<std::size_t>(j)];
        }
    });

    KMeansParams final_params = params;
    final_params.seed = params.seed + 104729ull;
    WeightedKMeansResult final_res = best_of_restarts(stage, stage_w, m, final_params, workers);

    Codebook book;
    book.centroids = std::move(final_res.centroids);
    book.passes_used = 2;
    book.seed = params.seed;

    // Report inertia against the full pool, not the staged centroids.
    const Eigen::Index n_blocks = (n + kAssignBlock - 1) / kAssignBlock;
    std::vector<double> block_inertia(static_cast<std::size_t>(n_blocks), 0.0);
    const Eigen::VectorXd unit = Eigen::VectorXd::Ones(n);
    parallel_for(static_cast<std::size_t>(n_blocks), workers, [&](std::size_t b) {
        const Eigen::Index begin = static_cast<Eigen::Index>(b) * kAssignBlock;
        const Eigen::Index end = std::min(begin + kAssignBlock, n);
        BlockStats stats;
        assign_block(pool.rows, unit, book.centroids, begin, end, stats);
        double acc = 0.0;
        for (Eigen::Index i = begin; i < end; ++i)
            acc += (pool.rows.row(i) -
                    book.centroids.row(stats.assignment[static_cast<std::size_t>(i - begin)]))
                       .squaredNorm();
        block_inertia[b] = acc;
    });
    book.inertia = 0.0;
    for (double v : block_inertia) book.inertia += v;
    return book;
}

void save_codebook(const Codebook& book, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write codebook: " + path);
    BinaryWriter w(out);
    w.magic("SBWC");
    w.u32(1);  // version
    w.u32(static_cast<std::uint32_t>(book.size()));
    w.u32(static_cast<std::uint32_t>(book.dim()));
    w.u32(static_cast<std::uint32_t>(book.passes_used));
    w.u64(book.seed);
    w.f64(book.inertia);
    for (Eigen::Index i = 0; i < book.centroids.rows(); ++i)
        for (Eigen::Index j = 0; j < book.centroids.cols(); ++j) w.f64(book.centroids(i, j));
}

Codebook load_codebook(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open codebook: " + path);
    BinaryReader r(in, "codebook " + path);
    r.expect_magic("SBWC");
    const std::uint32_t version = r.u32();
    if (version != 1) throw DataError("codebook " + path + ": unsupported version");
    Codebook book;
    const std::uint32_t m = r.u32();
    const std::uint32_t d = r.u32();
    book.passes_used = static_cast<int>(r.u32());
    book.seed = r.u64();
    book.inertia = r.f64();
    book.centroids.resize(m, d);
    for (std::uint32_t i = 0; i < m; ++i)
        for (std::uint32_t j = 0; j < d; ++j) book.centroids(i, j) = r.f64();
    return book;
}

void export_codebook_csv(const Codebook& book, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write codebook csv: " + path);
    char buf[32];
    for (Eigen::Index i = 0; i < book.centroids.rows(); ++i) {
        for (Eigen::Index j = 0; j < book.centroids.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", book.centroids(i, j));
            out << buf << (j + 1 < book.centroids.cols() ? "," : "\n");
        }
    }
}

}  // namespace sibow
