#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "yoga/rng.hpp"
#include "yoga/tensor.hpp"

namespace yoga {

// Elitist generational genetic algorithm for hyperparameter search: keep the
// top fraction, refill with clipped-Gaussian mutations of elite parents, no
// crossover. Fitness is maximized.

struct GAConfig {
    int64_t population = 20;
    int64_t generations = 50;
    std::vector<std::pair<double, double>> bounds;  // per-gene (lo, hi)
    double elite_fraction = 0.2;
    double mutation_rate = 0.9;    // per-gene mutation probability
    double mutation_scale = 0.2;   // Gaussian sigma as a fraction of the gene range
    uint64_t seed = 0;

    void validate() const {
        if (population < 2) throw ValueError("GAConfig: population must be >= 2");
        if (generations < 1) throw ValueError("GAConfig: generations must be >= 1");
        if (bounds.empty() || bounds.size() > 20)
            throw ValueError("GAConfig: need 1..20 hyperparameters");
        for (const auto& [lo, hi] : bounds)
            if (!(hi > lo)) throw ValueError("GAConfig: degenerate bounds");
        if (elite_fraction <= 0 || elite_fraction > 1)
            throw ValueError("GAConfig: elite fraction in (0,1]");
    }
};

struct GAResult {
    std::vector<double> best;
    double best_fitness = -std::numeric_limits<double>::infinity();
    std::vector<double> history;  // best-so-far fitness per generation
};

using GAObjective = std::function<double(const std::vector<double>&)>;

inline GAResult ga_tune(const GAObjective& objective, const GAConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const size_t genes = cfg.bounds.size();

    auto evaluate = [&](const std::vector<double>& genome) {
        // a failing candidate gets the worst fitness; the run continues
        try {
            const double f = objective(genome);
            return std::isfinite(f) ? f : -std::numeric_limits<double>::infinity();
        } catch (...) {
            return -std::numeric_limits<double>::infinity();
        }
    };

    struct Candidate {
        std::vector<double> genome;
        double fitness;
    };
    std::vector<Candidate> pop;
    for (int64_t i = 0; i < cfg.population; ++i) {
        std::vector<double> g(genes);
        for (size_t k = 0; k < genes; ++k)
            g[k] = rng.uniform(cfg.bounds[k].first, cfg.bounds[k].second);
        pop.push_back({g, 0.0});
        pop.back().fitness = evaluate(pop.back().genome);
    }

    GAResult result;
    const int64_t n_elite =
        std::max<int64_t>(1, static_cast<int64_t>(std::round(cfg.elite_fraction *
                                                             static_cast<double>(cfg.population))));
    for (int64_t gen = 0; gen < cfg.generations; ++gen) {
        std::stable_sort(pop.begin(), pop.end(),
                         [](const Candidate& a, const Candidate& b) { return a.fitness > b.fitness; });
        if (pop[0].fitness > result.best_fitness) {
            result.best_fitness = pop[0].fitness;
            result.best = pop[0].genome;
        }
        result.history.push_back(result.best_fitness);

        std::vector<Candidate> next(pop.begin(), pop.begin() + n_elite);
        while (static_cast<int64_t>(next.size()) < cfg.population) {
            const auto& parent = pop[static_cast<size_t>(rng.uniform_int(0, n_elite - 1))];
            Candidate child{parent.genome, 0.0};
            for (size_t k = 0; k < genes; ++k) {
                if (rng.uniform() < cfg.mutation_rate) {
                    const double range = cfg.bounds[k].second - cfg.bounds[k].first;
                    child.genome[k] += rng.normal(0.0, cfg.mutation_scale * range);
                }
                child.genome[k] =
                    std::clamp(child.genome[k], cfg.bounds[k].first, cfg.bounds[k].second);
            }
            child.fitness = evaluate(child.genome);
            next.push_back(std::move(child));
        }
        pop = std::move(next);
    }
    std::stable_sort(pop.begin(), pop.end(),
                     [](const Candidate& a, const Candidate& b) { return a.fitness > b.fitness; });
    if (pop[0].fitness > result.best_fitness) {
        result.best_fitness = pop[0].fitness;
        result.best = pop[0].genome;
    }
    return result;
}

}  // namespace yoga
