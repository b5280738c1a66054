#include "hgnp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "hgnp/util.hpp"

namespace hgnp {

namespace {

std::uint32_t read_be_u32(std::ifstream& f, const std::string& path) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4))
        throw IoError(path + ": truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError(images_path + ": cannot open");
    if (read_be_u32(img, images_path) != 0x00000803u)
        throw IoError(images_path + ": bad IDX image magic");
    const std::uint32_t n = read_be_u32(img, images_path);
    const std::uint32_t rows = read_be_u32(img, images_path);
    const std::uint32_t cols = read_be_u32(img, images_path);
    if (n == 0) throw IoError(images_path + ": empty image file");

    std::vector<unsigned char> pixels(std::size_t(n) * rows * cols);
    if (!img.read(reinterpret_cast<char*>(pixels.data()), std::streamsize(pixels.size())))
        throw IoError(images_path + ": truncated image data");

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError(labels_path + ": cannot open");
    if (read_be_u32(lab, labels_path) != 0x00000801u)
        throw IoError(labels_path + ": bad IDX label magic");
    const std::uint32_t ln = read_be_u32(lab, labels_path);
    if (ln != n)
        throw IoError(labels_path + ": label count " + std::to_string(ln) +
                      " != image count " + std::to_string(n));
    std::vector<unsigned char> raw_labels(ln);
    if (!lab.read(reinterpret_cast<char*>(raw_labels.data()), std::streamsize(ln)))
        throw IoError(labels_path + ": truncated label data");

    Dataset d;
    d.shape = TensorShape{1, rows, cols, true};
    d.inputs = Matrix(n, std::size_t(rows) * cols);
    for (std::size_t i = 0; i < d.inputs.data.size(); ++i)
        d.inputs.data[i] = double(pixels[i]) / 255.0;
    d.labels.assign(raw_labels.begin(), raw_labels.end());
    d.class_count = std::size_t(*std::max_element(d.labels.begin(), d.labels.end())) + 1;
    return d;
}

Dataset load_csv(const std::string& path, std::size_t feature_count) {
    if (feature_count == 0) throw IoError(path + ": feature count must be >= 1");
    std::ifstream f(path);
    if (!f) throw IoError(path + ": cannot open");

    Dataset d;
    d.shape = TensorShape{feature_count, 1, 1, false};
    std::vector<double> values;
    std::string line;
    std::size_t row = 0;
    while (std::getline(f, line)) {
        ++row;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> cells;
        while (std::getline(ss, cell, ',')) {
            std::size_t used = 0;
            double v;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                throw IoError(path + ": row " + std::to_string(row) + ": '" + cell +
                              "' is not numeric");
            }
            while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used])))
                ++used;
            if (used != cell.size())
                throw IoError(path + ": row " + std::to_string(row) + ": '" + cell +
                              "' is not numeric");
            cells.push_back(v);
        }
        if (cells.size() != feature_count + 1)
            throw IoError(path + ": row " + std::to_string(row) + " has " +
                          std::to_string(cells.size()) + " cells, expected " +
                          std::to_string(feature_count + 1));
        const double lf = cells[0];
        if (lf < 0.0 || lf != std::floor(lf))
            throw IoError(path + ": row " + std::to_string(row) +
                          ": label must be a non-negative integer");
        d.labels.push_back(int(lf));
        values.insert(values.end(), cells.begin() + 1, cells.end());
    }
    if (d.labels.empty()) throw IoError(path + ": no data rows");
    d.inputs = Matrix(d.labels.size(), feature_count);
    d.inputs.data = std::move(values);
    d.class_count = std::size_t(*std::max_element(d.labels.begin(), d.labels.end())) + 1;
    return d;
}

Dataset synth_gaussian_blobs(std::size_t classes, std::size_t dim, std::size_t samples,
                             double separation, std::uint64_t seed) {
    if (classes < 2) throw Error("synth_gaussian_blobs: need at least 2 classes");
    if (separation < 0.0) throw Error("synth_gaussian_blobs: separation must be >= 0");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Random unit directions scaled so pairwise mean distance is about
    // `separation` (two random unit vectors sit ~sqrt(2) apart).
    Matrix means(classes, dim);
    for (std::size_t c = 0; c < classes; ++c) {
        double* m = means.row(c);
        double nrm = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            m[j] = gauss(rng);
            nrm += m[j] * m[j];
        }
        nrm = std::sqrt(nrm);
        const double scale = nrm > 0.0 ? separation / std::sqrt(2.0) / nrm : 0.0;
        for (std::size_t j = 0; j < dim; ++j) m[j] *= scale;
    }

    Dataset d;
    d.shape = TensorShape{dim, 1, 1, false};
    d.inputs = Matrix(samples, dim);
    d.labels.resize(samples);
    d.class_count = classes;
    for (std::size_t i = 0; i < samples; ++i) {
        const std::size_t c = i % classes;
        d.labels[i] = int(c);
        double* x = d.inputs.row(i);
        const double* m = means.row(c);
        for (std::size_t j = 0; j < dim; ++j) x[j] = m[j] + gauss(rng);
    }
    return d;
}

void augment_hflip(Matrix& batch, const TensorShape& shape, double p, std::uint64_t seed) {
    if (!shape.image) throw Error("augment_hflip: data is not image-shaped");
    if (batch.cols != shape.flat()) throw Error("augment_hflip: shape mismatch");
    if (p < 0.0 || p > 1.0) throw Error("augment_hflip: probability out of range");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const std::size_t plane = shape.height * shape.width;
    for (std::size_t b = 0; b < batch.rows; ++b) {
        const bool flip = p >= 1.0 || (p > 0.0 && unif(rng) < p);
        if (!flip) continue;
        double* r = batch.row(b);
        for (std::size_t c = 0; c < shape.channels; ++c)
            for (std::size_t y = 0; y < shape.height; ++y) {
                double* row = r + c * plane + y * shape.width;
                std::reverse(row, row + shape.width);
            }
    }
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, std::size_t epoch) {
    if (batch_size == 0) throw Error("batches: batch_size must be >= 1");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(seed, 0xba7c4e5u, epoch));
    std::shuffle(idx.begin(), idx.end(), rng);

    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        out.emplace_back(idx.begin() + long(start), idx.begin() + long(end));
    }
    return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), m.cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(m.row(idx[i]), m.row(idx[i]) + m.cols, out.row(i));
    return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels,
                               const std::vector<std::size_t>& idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
}

void standardize(Dataset& d) {
    const std::size_t plane = d.shape.image ? d.shape.height * d.shape.width : 1;
    const std::size_t channels = d.shape.image ? d.shape.channels : d.shape.flat();
    const std::size_t n = d.inputs.rows;
    for (std::size_t c = 0; c < channels; ++c) {
        double mean = 0.0, count = double(n * plane);
        for (std::size_t b = 0; b < n; ++b) {
            const double* r = d.inputs.row(b) + c * plane;
            for (std::size_t f = 0; f < plane; ++f) mean += r[f];
        }
        mean /= count;
        double var = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const double* r = d.inputs.row(b) + c * plane;
            for (std::size_t f = 0; f < plane; ++f) var += (r[f] - mean) * (r[f] - mean);
        }
        const double stdev = std::sqrt(var / count);
        const double inv = stdev > 0.0 ? 1.0 / stdev : 1.0;
        for (std::size_t b = 0; b < n; ++b) {
            double* r = d.inputs.row(b) + c * plane;
            for (std::size_t f = 0; f < plane; ++f) r[f] = (r[f] - mean) * inv;
        }
    }
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::size_t train_count) {
    if (train_count > d.size()) throw Error("split_dataset: split larger than dataset");
    Dataset train, val;
    train.shape = val.shape = d.shape;
    train.class_count = val.class_count = d.class_count;
    train.split = "train";
    val.split = "validation";

    train.inputs = Matrix(train_count, d.inputs.cols);
    std::copy(d.inputs.data.begin(), d.inputs.data.begin() + long(train_count * d.inputs.cols),
              train.inputs.data.begin());
    train.labels.assign(d.labels.begin(), d.labels.begin() + long(train_count));

    const std::size_t vn = d.size() - train_count;
    val.inputs = Matrix(vn, d.inputs.cols);
    std::copy(d.inputs.data.begin() + long(train_count * d.inputs.cols), d.inputs.data.end(),
              val.inputs.data.begin());
    val.labels.assign(d.labels.begin() + long(train_count), d.labels.end());
    return {std::move(train), std::move(val)};
}

}  // namespace hgnp
