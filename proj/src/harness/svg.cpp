#include <cmath>
#include <cstdarg>
#include <cstdio>

#include "uforge/harness.hpp"

namespace uforge::harness {

namespace {

constexpr int kPanel = 220;
constexpr int kMargin = 16;
constexpr int kHeader = 22;
constexpr double kExtent = 4.0;  // plot window [-4, 4]^2

const char* color_for(const concepts::ConceptTable& table, const std::string& id) {
    static const char* palette[] = {"#d62728", "#1f77b4", "#2ca02c",
                                    "#ff7f0e", "#9467bd", "#8c564b"};
    int idx = table.index_of(id);
    if (idx < 0) return "#7f7f7f";
    return palette[idx % 6];
}

void append_fmt(std::string& out, const char* fmt, ...) {
    char buf[512];
    va_list args;
    va_start(args, fmt);
    std::vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    out += buf;
}

}  // namespace

std::string render_scatter_svg(const std::string& title,
                               const std::vector<ScatterPanel>& panels, int columns,
                               const concepts::ConceptTable& table) {
    if (columns < 1) columns = 1;
    int rows = (static_cast<int>(panels.size()) + columns - 1) / columns;
    int width = columns * (kPanel + kMargin) + kMargin;
    int height = rows * (kPanel + kHeader + kMargin) + kMargin + kHeader;

    std::string out;
    append_fmt(out,
               "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
               "viewBox=\"0 0 %d %d\">\n",
               width, height, width, height);
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    append_fmt(out,
               "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"13\">"
               "%s</text>\n",
               kMargin, kHeader - 6, title.c_str());

    for (size_t p = 0; p < panels.size(); ++p) {
        int col = static_cast<int>(p) % columns;
        int row = static_cast<int>(p) / columns;
        int x0 = kMargin + col * (kPanel + kMargin);
        int y0 = kHeader + kMargin + row * (kPanel + kHeader + kMargin);
        append_fmt(out,
                   "<text x=\"%d\" y=\"%d\" font-family=\"monospace\" font-size=\"11\">"
                   "%s</text>\n",
                   x0, y0 + kHeader - 8, panels[p].title.c_str());
        int py0 = y0 + kHeader;
        append_fmt(out,
                   "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" "
                   "stroke=\"#444\" stroke-width=\"1\"/>\n",
                   x0, py0, kPanel, kPanel);
        if (!panels[p].samples) continue;
        for (size_t i = 0; i < panels[p].samples->points.size(); ++i) {
            const auto& pt = panels[p].samples->points[i];
            if (std::abs(pt[0]) > kExtent || std::abs(pt[1]) > kExtent) continue;
            double cx = x0 + (pt[0] + kExtent) / (2.0 * kExtent) * kPanel;
            double cy = py0 + (kExtent - pt[1]) / (2.0 * kExtent) * kPanel;
            const char* color =
                color_for(table, concepts::bayes_classify(table, pt[0], pt[1]));
            append_fmt(out,
                       "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"1.6\" fill=\"%s\" "
                       "fill-opacity=\"0.55\"/>\n",
                       cx, cy, color);
        }
    }
    out += "</svg>\n";
    return out;
}

}  // namespace uforge::harness
