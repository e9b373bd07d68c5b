#include "xdc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "xdc/error.hpp"

namespace xdc {

namespace {

bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

// Correlation without the both-constant error; nullopt if either side is constant.
std::optional<double> corr(std::span<const double> a, std::span<const double> b) {
  if (is_constant(a) || is_constant(b)) return std::nullopt;
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt(std::optional<double> v) { return v ? fmt(*v) : "undefined"; }

}  // namespace

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(Errc::LengthMismatch, "pearson inputs differ in length");
  if (a.size() < 2) fail(Errc::LengthMismatch, "pearson needs at least two points");
  if (is_constant(a) && is_constant(b)) fail(Errc::DegenerateInput, "both pearson inputs are constant");
  return corr(a, b);
}

// ---- peaks ----------------------------------------------------------------------------

std::vector<PeakMeasurement> detect_peaks(std::span<const double> y, const Grid& grid, const PeakOptions& opt) {
  std::vector<PeakMeasurement> found;
  const std::size_t n = y.size();
  if (n < 3) return found;
  const double top = *std::max_element(y.begin(), y.end());
  if (!(top > 0)) return found;
  const double threshold = opt.min_height * top;

  std::vector<std::size_t> cand;
  for (std::size_t i = 1; i + 1 < n; ++i)
    if (y[i] > y[i - 1] && y[i] >= y[i + 1] && y[i] > threshold) cand.push_back(i);
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return y[a] > y[b]; });

  for (std::size_t i : cand) {
    PeakMeasurement p;
    p.index = i;
    p.height = y[i];
    const double den = y[i - 1] - 2 * y[i] + y[i + 1];
    const double off = den < 0 ? 0.5 * (y[i - 1] - y[i + 1]) / den : 0.0;
    p.position = grid.at(i) + off * grid.step;
    bool clash = false;
    for (const auto& q : found)
      if (std::abs(q.position - p.position) < opt.min_separation) clash = true;
    if (clash) continue;

    const double half = 0.5 * y[i];
    std::size_t l = i;
    while (l > 0 && y[l - 1] >= half) --l;
    double left = grid.at(l);
    if (l > 0) left = grid.at(l - 1) + (half - y[l - 1]) / (y[l] - y[l - 1]) * grid.step;
    std::size_t r = i;
    while (r + 1 < n && y[r + 1] >= half) ++r;
    double right = grid.at(r);
    if (r + 1 < n) right = grid.at(r) + (y[r] - half) / (y[r] - y[r + 1]) * grid.step;
    p.fwhm = right - left;
    if (!(p.fwhm > 0)) p.fwhm = grid.step;
    found.push_back(p);
  }
  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.position < b.position; });
  return found;
}

PeakMatch match_peaks(std::span<const PeakMeasurement> pred, std::span<const PeakMeasurement> truth, double tol) {
  PeakMatch m;
  std::vector<std::size_t> order(truth.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return truth[a].height > truth[b].height; });
  std::vector<bool> used(pred.size(), false);
  for (std::size_t t : order) {
    std::size_t best = pred.size();
    double bd = tol;
    for (std::size_t j = 0; j < pred.size(); ++j) {
      if (used[j]) continue;
      const double d = std::abs(pred[j].position - truth[t].position);
      if (d <= bd && (best == pred.size() || d < bd)) {
        best = j;
        bd = d;
      }
    }
    if (best == pred.size()) {
      ++m.unmatched_truth;
      continue;
    }
    used[best] = true;
    m.pairs.push_back({pred[best], truth[t]});
  }
  m.unmatched_pred = static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
  return m;
}

std::optional<PeakMetrics> peak_metrics(std::span<const PeakPair> pairs) {
  if (pairs.empty()) return std::nullopt;
  PeakMetrics r;
  for (const auto& p : pairs) {
    r.shift += std::abs(p.pred.position - p.truth.position);
    r.fwhm_error += std::abs(p.pred.fwhm - p.truth.fwhm);
  }
  r.shift /= static_cast<double>(pairs.size());
  r.fwhm_error /= static_cast<double>(pairs.size());
  return r;
}

// ---- retrieval ----------------------------------------------------------------------------

RetrievalIndex::RetrievalIndex(const Grid& grid, std::vector<std::string> ids, std::vector<std::vector<double>> patterns)
    : grid_(grid), ids_(std::move(ids)) {
  if (ids_.size() != patterns.size()) fail(Errc::LengthMismatch, "one pattern per index id required");
  for (auto& p : patterns) {
    if (p.size() != grid_.length) fail(Errc::GridMismatch, "index pattern is not on the index grid");
    double nrm = 0;
    for (double v : p) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (!(nrm > 0)) fail(Errc::DegenerateInput, "index pattern has zero norm");
    for (double& v : p) v /= nrm;
    unit_.push_back(std::move(p));
  }
}

RetrievalIndex RetrievalIndex::from_unit_vectors(const Grid& grid, std::vector<std::string> ids,
                                                 std::vector<std::vector<double>> units) {
  if (ids.size() != units.size()) fail(Errc::LengthMismatch, "one pattern per index id required");
  for (const auto& u : units)
    if (u.size() != grid.length) fail(Errc::GridMismatch, "index pattern is not on the index grid");
  RetrievalIndex r;
  r.grid_ = grid;
  r.ids_ = std::move(ids);
  r.unit_ = std::move(units);
  return r;
}

RetrievalIndex RetrievalIndex::from_library(const ReferenceLibrary& lib) {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> pats;
  for (const auto& [id, p] : lib.entries) {
    ids.push_back(id);
    pats.push_back(p.intensities);
  }
  return RetrievalIndex(lib.grid, std::move(ids), std::move(pats));
}

namespace {

template <class T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) fail(Errc::Io, "truncated index file " + path);
  return v;
}

}  // namespace

void write_index(const std::string& path, const RetrievalIndex& index) {
  std::ofstream o(path, std::ios::binary);
  if (!o) fail(Errc::Io, "cannot write " + path);
  o.write("XDCI", 4);
  put<std::uint32_t>(o, kIndexFormatVersion);
  put(o, index.grid().min);
  put(o, index.grid().step);
  put<std::uint64_t>(o, index.grid().length);
  put<std::uint64_t>(o, index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    put<std::uint32_t>(o, static_cast<std::uint32_t>(index.ids()[i].size()));
    o.write(index.ids()[i].data(), static_cast<std::streamsize>(index.ids()[i].size()));
    o.write(reinterpret_cast<const char*>(index.unit(i).data()),
            static_cast<std::streamsize>(index.unit(i).size() * sizeof(double)));
  }
  if (!o) fail(Errc::Io, "write failed for " + path);
}

RetrievalIndex read_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "XDCI", 4) != 0) fail(Errc::Io, path + " is not an index file");
  if (get<std::uint32_t>(in, path) != kIndexFormatVersion) fail(Errc::Io, "unsupported index version in " + path);
  Grid g;
  g.min = get<double>(in, path);
  g.step = get<double>(in, path);
  g.length = get<std::uint64_t>(in, path);
  const auto n = get<std::uint64_t>(in, path);
  if (g.length == 0 || g.length > (1u << 24) || n > (1u << 24)) fail(Errc::Io, "implausible index header in " + path);
  std::vector<std::string> ids;
  std::vector<std::vector<double>> pats;
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    if (len > 4096) fail(Errc::Io, "implausible id length in " + path);
    std::string id(len, '\0');
    std::vector<double> v(g.length);
    if (!in.read(id.data(), len) ||
        !in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
      fail(Errc::Io, "truncated index file " + path);
    ids.push_back(std::move(id));
    pats.push_back(std::move(v));
  }
  return RetrievalIndex::from_unit_vectors(g, std::move(ids), std::move(pats));
}

double shifted_pearson(std::span<const double> q, std::span<const double> ref, std::size_t max_shift) {
  const std::size_t n = std::min(q.size(), ref.size());
  double best = -1;
  const auto ms = static_cast<long>(std::min(max_shift, n > 2 ? n - 2 : 0));
  for (long s = -ms; s <= ms; ++s) {
    // pairs q[i] with ref[i + s]
    const std::size_t q0 = s < 0 ? static_cast<std::size_t>(-s) : 0;
    const std::size_t r0 = s < 0 ? 0 : static_cast<std::size_t>(s);
    const std::size_t len = n - static_cast<std::size_t>(std::abs(s));
    if (const auto c = corr(q.subspan(q0, len), ref.subspan(r0, len))) best = std::max(best, *c);
  }
  return best;
}

std::vector<RetrievalHit> retrieve_topk(std::span<const double> query, const RetrievalIndex& index,
                                        std::size_t candidates, std::size_t k, double window) {
  if (index.size() == 0) fail(Errc::EmptyIndex, "retrieval index is empty");
  if (query.size() != index.grid().length) fail(Errc::GridMismatch, "query is not on the index grid");
  if (k == 0 || candidates < k) fail(Errc::InvalidConfig, "need candidates >= k >= 1");
  std::vector<RetrievalHit> hits(index.size());
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& u = index.unit(i);
    double dot = 0, qq = 0;
    for (std::size_t t = 0; t < query.size(); ++t) {
      dot += query[t] * u[t];
      qq += query[t] * query[t];
    }
    hits[i].id = index.ids()[i];
    hits[i].cosine = qq > 0 ? dot / std::sqrt(qq) : 0.0;
  }
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return hits[a].cosine > hits[b].cosine; });
  order.resize(std::min(candidates, order.size()));
  const auto max_shift = static_cast<std::size_t>(std::llround(window / index.grid().step));
  for (std::size_t i : order) hits[i].rerank = shifted_pearson(query, index.unit(i), max_shift);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return hits[a].rerank > hits[b].rerank; });
  std::vector<RetrievalHit> out;
  for (std::size_t j = 0; j < std::min(k, order.size()); ++j) out.push_back(hits[order[j]]);
  return out;
}

// ---- reports ----------------------------------------------------------------------------

void MetricMean::add(std::optional<double> v) {
  if (!v) {
    ++undefined;
    return;
  }
  sum += *v;
  ++count;
}

std::optional<double> MetricMean::mean() const {
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

double EvalRow::top1() const { return queries ? 100.0 * static_cast<double>(top1_hits) / static_cast<double>(queries) : 0.0; }
double EvalRow::top10() const {
  return queries ? 100.0 * static_cast<double>(top10_hits) / static_cast<double>(queries) : 0.0;
}

EvalInput make_eval_input(const MixtureSample& s, const DecompositionResult& d) {
  EvalInput in;
  in.grid = s.mixed.grid;
  in.mixture = s.mixed.intensities;
  in.truths = s.weighted_targets();
  in.truths.resize(static_cast<std::size_t>(s.active_count));
  in.truth_ids = s.component_ids;
  in.predictions = d.components;
  in.reconstruction = d.reconstruction;
  return in;
}

namespace {

SampleEval evaluate_one(std::size_t idx, const EvalInput& in, const RetrievalIndex* index, const EvalOptions& opt,
                        std::vector<PeakMatch>& matches) {
  const std::size_t L = in.grid.length;
  auto check = [&](const std::vector<double>& v) {
    if (v.size() != L) fail(Errc::GridMismatch, "sample " + std::to_string(idx) + " is not on its grid");
  };
  check(in.mixture);
  check(in.reconstruction);
  for (const auto& v : in.truths) check(v);
  for (const auto& v : in.predictions) check(v);
  if (index && !index->grid().same_as(in.grid)) fail(Errc::GridMismatch, "index grid differs from sample grid");

  SampleEval ev;
  ev.index = idx;
  ev.k = in.truths.size();
  double l1 = 0;
  for (std::size_t t = 0; t < L; ++t) l1 += std::abs(in.reconstruction[t] - in.mixture[t]);
  ev.mixture_l1 = l1 / static_cast<double>(L);

  const PitResult pit = pit_match(in.predictions, in.truths, opt.loss);
  for (std::size_t k = 0; k < in.truths.size(); ++k) {
    PairEval pe;
    pe.target = k;
    pe.slot = pit.slot_of_target[k];
    const auto& pred = in.predictions[pe.slot];
    const auto& truth = in.truths[k];
    pe.pearson = corr(pred, truth);
    const auto pp = detect_peaks(pred, in.grid, opt.peaks);
    const auto tp = detect_peaks(truth, in.grid, opt.peaks);
    const auto& m = matches.emplace_back(match_peaks(pp, tp, opt.match_tol));
    if (const auto pm = peak_metrics(m.pairs)) {
      pe.peak_shift = pm->shift;
      pe.fwhm_error = pm->fwhm_error;
    }
    if (index && k < in.truth_ids.size()) {
      const auto hits = retrieve_topk(pred, *index, std::max<std::size_t>(opt.candidates, 10), 10,
                                      opt.rerank_window);
      const std::string& id = in.truth_ids[k];
      pe.top1 = !hits.empty() && hits[0].id == id;
      pe.top10 = std::any_of(hits.begin(), hits.end(), [&](const auto& h) { return h.id == id; });
    }
    ev.pairs.push_back(pe);
  }
  return ev;
}

void fold(EvalRow& row, const SampleEval& ev, const std::vector<PeakMatch>& matches) {
  ++row.samples;
  row.mixture_l1.add(ev.mixture_l1);
  for (const auto& pe : ev.pairs) {
    ++row.pairs;
    row.pearson.add(pe.pearson);
    row.peak_shift.add(pe.peak_shift);
    row.fwhm_error.add(pe.fwhm_error);
    if (pe.top1) {
      ++row.queries;
      row.top1_hits += *pe.top1 ? 1 : 0;
      row.top10_hits += pe.top10.value_or(false) ? 1 : 0;
    }
  }
  for (const auto& m : matches) {
    row.matched_peaks += m.pairs.size();
    row.unmatched_pred_peaks += m.unmatched_pred;
    row.unmatched_true_peaks += m.unmatched_truth;
  }
}

std::string row_lines(const std::string& prefix, const EvalRow& r) {
  std::ostringstream o;
  o << prefix << "samples=" << r.samples << "\n";
  o << prefix << "pairs=" << r.pairs << "\n";
  o << prefix << "pearson=" << fmt(r.pearson.mean()) << "\n";
  o << prefix << "pearson_undefined=" << r.pearson.undefined << "\n";
  o << prefix << "peak_shift_deg=" << fmt(r.peak_shift.mean()) << "\n";
  o << prefix << "fwhm_error_deg=" << fmt(r.fwhm_error.mean()) << "\n";
  o << prefix << "peak_metrics_undefined=" << r.peak_shift.undefined << "\n";
  o << prefix << "matched_peaks=" << r.matched_peaks << "\n";
  o << prefix << "unmatched_pred_peaks=" << r.unmatched_pred_peaks << "\n";
  o << prefix << "unmatched_true_peaks=" << r.unmatched_true_peaks << "\n";
  o << prefix << "mixture_l1=" << fmt(r.mixture_l1.mean()) << "\n";
  o << prefix << "retrieval_queries=" << r.queries << "\n";
  o << prefix << "top1_pct=" << fmt(r.top1()) << "\n";
  o << prefix << "top10_pct=" << fmt(r.top10()) << "\n";
  return o.str();
}

}  // namespace

EvalReport evaluate_run(std::span<const EvalInput> inputs, const RetrievalIndex* index, const EvalOptions& opt) {
  opt.loss.validate();
  const std::size_t n = inputs.size();
  std::vector<SampleEval> evs(n);
  std::vector<std::vector<PeakMatch>> matches(n);
  std::vector<std::exception_ptr> errors(n);
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(opt.threads), n));
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) {
      try {
        evs[i] = evaluate_one(i, inputs[i], index, opt, matches[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> th;
    for (std::size_t w = 0; w < workers; ++w) th.emplace_back(run, w);
    for (auto& t : th) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  EvalReport rep;
  for (std::size_t i = 0; i < n; ++i) {
    fold(rep.overall, evs[i], matches[i]);
    fold(rep.by_k[evs[i].k], evs[i], matches[i]);
  }
  rep.samples = std::move(evs);
  return rep;
}

EvalReport evaluate_model(const Model& model, std::span<const MixtureSample> samples, const RetrievalIndex* index,
                          const EvalOptions& opt) {
  std::vector<EvalInput> inputs(samples.size());
  std::vector<std::exception_ptr> errors(samples.size());
  const std::size_t n = samples.size();
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(opt.threads), n));
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) {
      try {
        inputs[i] = make_eval_input(samples[i], model.decompose(samples[i].mixed.intensities));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> th;
    for (std::size_t w = 0; w < workers; ++w) th.emplace_back(run, w);
    for (auto& t : th) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return evaluate_run(inputs, index, opt);
}

std::string EvalReport::table() const {
  std::ostringstream o;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %8s %8s %10s %12s %12s %10s %8s %8s\n", "K", "samples", "pairs", "pearson",
                "shift_deg", "dfwhm_deg", "mix_l1", "top1%", "top10%");
  o << buf;
  auto line = [&](const std::string& name, const EvalRow& r) {
    auto cell = [](std::optional<double> v) { return v ? fmt(*v) : std::string("-"); };
    std::snprintf(buf, sizeof buf, "%-8s %8zu %8zu %10s %12s %12s %10s %8s %8s\n", name.c_str(), r.samples, r.pairs,
                  cell(r.pearson.mean()).c_str(), cell(r.peak_shift.mean()).c_str(),
                  cell(r.fwhm_error.mean()).c_str(), cell(r.mixture_l1.mean()).c_str(),
                  r.queries ? fmt(r.top1()).c_str() : "-", r.queries ? fmt(r.top10()).c_str() : "-");
    o << buf;
  };
  for (const auto& [k, r] : by_k) line(std::to_string(k), r);
  line("all", overall);
  return o.str();
}

std::string EvalReport::summary() const {
  std::string s = row_lines("", overall);
  for (const auto& [k, r] : by_k) s += row_lines("k" + std::to_string(k) + ".", r);
  return s;
}

std::string EvalReport::to_text() const {
  std::ostringstream o;
  o << summary();
  for (const auto& ev : samples)
    for (const auto& pe : ev.pairs) {
      o << "sample=" << ev.index << " k=" << ev.k << " target=" << pe.target << " slot=" << pe.slot
        << " pearson=" << fmt(pe.pearson) << " peak_shift=" << fmt(pe.peak_shift)
        << " fwhm_error=" << fmt(pe.fwhm_error) << " mixture_l1=" << fmt(ev.mixture_l1);
      if (pe.top1) o << " top1=" << *pe.top1 << " top10=" << pe.top10.value_or(false);
      o << "\n";
    }
  return o.str();
}

void write_plot_data(const std::string& dir, const EvalInput& in, const SampleEval& ev) {
  std::filesystem::create_directories(dir);
  for (const auto& pe : ev.pairs) {
    write_pattern_text(dir + "/truth_" + std::to_string(pe.target) + ".txt",
                       DiffractionPattern(in.grid, in.truths[pe.target]));
    write_pattern_text(dir + "/pred_" + std::to_string(pe.target) + ".txt",
                       DiffractionPattern(in.grid, in.predictions[pe.slot]));
  }
  write_pattern_text(dir + "/mixture.txt", DiffractionPattern(in.grid, in.mixture));
  write_pattern_text(dir + "/reconstruction.txt", DiffractionPattern(in.grid, in.reconstruction));
}

}  // namespace xdc
