#include "twinforge/basis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <unordered_set>

#include "json.hpp"

namespace twinforge {

int BasisId::resolution_sum() const {
    int s = 0;
    for (int v : j) s += v;
    return s;
}

bool BasisId::tie_less(const BasisId& a, const BasisId& b) {
    const int sa = a.resolution_sum(), sb = b.resolution_sum();
    if (sa != sb) return sa < sb;
    if (a.j != b.j) return a.j < b.j;
    return a.eta < b.eta;
}

BasisId make_basis1(int j, int eta) { return BasisId{{j}, {eta}}; }

double mother_sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

BasisEval eval_basis(const BasisId& id, std::span<const double> u) {
    if (id.dims() < 1) throw error(errc::config, "basis: id must have at least one dimension");
    if (static_cast<int>(u.size()) != id.dims())
        throw error(errc::config, "basis: argument dimension mismatch");
    const int k = id.dims();
    std::vector<double> phi(k), dphi(k);
    for (int d = 0; d < k; ++d) {
        const double scale = std::ldexp(1.0, id.j[d]);
        const double s = scale * u[d] - id.eta[d];
        const double p = mother_sigmoid(s);
        phi[d] = p;
        dphi[d] = scale * p * (1.0 - p);
    }
    BasisEval out;
    out.value = 1.0;
    for (int d = 0; d < k; ++d) out.value *= phi[d];
    out.gradient.assign(k, 0.0);
    for (int d = 0; d < k; ++d) {
        double g = dphi[d];
        for (int e = 0; e < k; ++e)
            if (e != d) g *= phi[e];
        out.gradient[d] = g;
    }
    return out;
}

void Dictionary::add(BasisId id, double alpha) {
    if (find(id) >= 0) throw error(errc::config, "dictionary: duplicate basis id");
    if (!ids_.empty() && id.dims() != dims())
        throw error(errc::config, "dictionary: mixed basis dimensions");
    ids_.push_back(std::move(id));
    alphas_.push_back(alpha);
}

void Dictionary::insert(int index, BasisId id, double alpha) {
    if (find(id) >= 0) throw error(errc::config, "dictionary: duplicate basis id");
    ids_.insert(ids_.begin() + index, std::move(id));
    alphas_.insert(alphas_.begin() + index, alpha);
}

void Dictionary::remove(int index) {
    ids_.erase(ids_.begin() + index);
    alphas_.erase(alphas_.begin() + index);
}

int Dictionary::find(const BasisId& id) const {
    for (int i = 0; i < size(); ++i)
        if (ids_[i] == id) return i;
    return -1;
}

void Dictionary::set_alphas(std::span<const double> a) {
    if (static_cast<int>(a.size()) != size())
        throw error(errc::config, "dictionary: coefficient count mismatch");
    alphas_.assign(a.begin(), a.end());
}

BasisEval Dictionary::eval(std::span<const double> u) const {
    BasisEval out;
    out.gradient.assign(u.size(), 0.0);
    for (int i = 0; i < size(); ++i) {
        BasisEval b = eval_basis(ids_[i], u);
        out.value += alphas_[i] * b.value;
        for (size_t d = 0; d < u.size(); ++d) out.gradient[d] += alphas_[i] * b.gradient[d];
    }
    return out;
}

ScalarFluxEval Dictionary::eval1(double u) const {
    ScalarFluxEval out;
    for (int i = 0; i < size(); ++i) {
        const double scale = std::ldexp(1.0, ids_[i].j[0]);
        const double p = mother_sigmoid(scale * u - ids_[i].eta[0]);
        out.value += alphas_[i] * p;
        out.derivative += alphas_[i] * scale * p * (1.0 - p);
    }
    return out;
}

namespace {
struct IdHash {
    size_t operator()(const BasisId& id) const {
        size_t h = 0x9e3779b97f4a7c15ull;
        auto mix = [&h](int v) {
            h ^= static_cast<size_t>(static_cast<std::uint32_t>(v)) + 0x9e3779b9ull + (h << 6) + (h >> 2);
        };
        for (int v : id.j) mix(v);
        for (int v : id.eta) mix(~v);
        return h;
    }
};
} // namespace

std::vector<BasisId> neighborhood(std::span<const BasisId> ids) {
    if (ids.empty()) throw error(errc::config, "neighborhood: empty basis set");
    std::vector<BasisId> out;
    std::unordered_set<BasisId, IdHash> seen;
    auto emit = [&](BasisId cand) {
        if (seen.insert(cand).second) out.push_back(std::move(cand));
    };
    for (const BasisId& id : ids) {
        for (int d = 0; d < id.dims(); ++d) {
            BasisId finer = id;
            finer.j[d] += 1;
            finer.eta[d] *= 2; // same center eta/2^j at the next resolution
            emit(std::move(finer));
            BasisId right = id;
            right.eta[d] += 1;
            emit(std::move(right));
            BasisId left = id;
            left.eta[d] -= 1;
            emit(std::move(left));
        }
    }
    return out;
}

TapedFlux::TapedFlux(Tape& tape, const Dictionary& dict) : dict_(&dict) {
    if (!dict.empty() && dict.dims() != 1)
        throw error(errc::config, "taped flux supports univariate dictionaries");
    alpha_nodes_.reserve(dict.size());
    for (int i = 0; i < dict.size(); ++i) alpha_nodes_.push_back(tape.input(dict.alpha(i)));
}

std::pair<int, int> TapedFlux::record_value_and_derivative(Tape& tape, int u_node) const {
    if (dict_->empty()) {
        const int zero = tape.constant(0.0);
        return {zero, zero};
    }
    const int one = tape.constant(1.0);
    int value = tape.constant(0.0);
    int deriv = tape.constant(0.0);
    for (int i = 0; i < dict_->size(); ++i) {
        const BasisId& id = dict_->id(i);
        const int scale = tape.constant(std::ldexp(1.0, id.j[0]));
        const int s = tape.sub(tape.mul(scale, u_node), tape.constant(static_cast<double>(id.eta[0])));
        const int phi = tape.logistic(s);
        const int term = tape.mul(alpha_nodes_[i], phi);
        value = tape.add(value, term);
        const int dphi = tape.mul(phi, tape.sub(one, phi));
        deriv = tape.add(deriv, tape.mul(scale, tape.mul(alpha_nodes_[i], dphi)));
    }
    return {value, deriv};
}

void save_dictionary(const std::filesystem::path& path, const Dictionary& dict) {
    nlohmann::ordered_json records = nlohmann::ordered_json::array();
    for (int i = 0; i < dict.size(); ++i) {
        nlohmann::ordered_json rec;
        rec["j"] = dict.id(i).j;
        rec["eta"] = dict.id(i).eta;
        rec["alpha"] = dict.alpha(i);
        records.push_back(std::move(rec));
    }
    std::ofstream out(path);
    if (!out) throw error(errc::io, "save_dictionary: cannot open " + path.string());
    out << records.dump(2) << "\n";
}

Dictionary load_dictionary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw error(errc::io, "load_dictionary: cannot open " + path.string());
    nlohmann::json records;
    try {
        in >> records;
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::io, std::string("load_dictionary: parse failure: ") + e.what());
    }
    if (!records.is_array()) throw error(errc::io, "load_dictionary: expected a list of records");
    Dictionary dict;
    for (const auto& rec : records) {
        BasisId id;
        try {
            id.j = rec.at("j").get<std::vector<int>>();
            id.eta = rec.at("eta").get<std::vector<int>>();
            dict.add(std::move(id), rec.at("alpha").get<double>());
        } catch (const nlohmann::json::exception& e) {
            throw error(errc::io, std::string("load_dictionary: bad record: ") + e.what());
        }
    }
    return dict;
}

} // namespace twinforge
