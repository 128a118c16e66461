#include "uforge/common.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <mutex>
#include <thread>

namespace uforge {

std::string Fnv1a::hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

bool is_finite(double v) { return std::isfinite(v); }

namespace {

thread_local bool t_inside_worker = false;

class WorkerPool {
  public:
    static WorkerPool& instance() {
        static WorkerPool pool;
        return pool;
    }

    int size() const { return static_cast<int>(workers_.size()); }

    void run(int n_tasks, const std::function<void(int)>& fn) {
        if (n_tasks <= 0) return;
        if (n_tasks == 1 || t_inside_worker || workers_.empty()) {
            for (int i = 0; i < n_tasks; ++i) fn(i);
            return;
        }
        std::vector<std::exception_ptr> errors(n_tasks);
        std::unique_lock<std::mutex> lock(mu_);
        fn_ = &fn;
        errors_ = &errors;
        n_tasks_ = n_tasks;
        next_task_.store(0, std::memory_order_relaxed);
        remaining_ = n_tasks;
        ++generation_;
        cv_work_.notify_all();
        // The submitting thread chips in as well.
        lock.unlock();
        drain();
        lock.lock();
        cv_done_.wait(lock, [&] { return remaining_ == 0; });
        fn_ = nullptr;
        errors_ = nullptr;
        lock.unlock();
        // lowest task index wins, independent of scheduling
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

  private:
    WorkerPool() {
        unsigned hw = std::thread::hardware_concurrency();
        int n = static_cast<int>(hw == 0 ? 2 : hw);
        for (int i = 0; i < n - 1; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~WorkerPool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            shutdown_ = true;
            cv_work_.notify_all();
        }
        for (auto& t : workers_) t.join();
    }

    void drain() {
        t_inside_worker = true;
        while (true) {
            int idx = next_task_.fetch_add(1, std::memory_order_relaxed);
            if (idx >= n_tasks_) break;
            try {
                (*fn_)(idx);
            } catch (...) {
                (*errors_)[idx] = std::current_exception();
            }
            std::lock_guard<std::mutex> lock(mu_);
            if (--remaining_ == 0) cv_done_.notify_all();
        }
        t_inside_worker = false;
    }

    void worker_loop() {
        uint64_t seen = 0;
        while (true) {
            std::unique_lock<std::mutex> lock(mu_);
            cv_work_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
            if (shutdown_) return;
            seen = generation_;
            lock.unlock();
            drain();
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_work_;
    std::condition_variable cv_done_;
    const std::function<void(int)>* fn_ = nullptr;
    std::vector<std::exception_ptr>* errors_ = nullptr;
    std::atomic<int> next_task_{0};
    int n_tasks_ = 0;
    int remaining_ = 0;
    uint64_t generation_ = 0;
    bool shutdown_ = false;
};

}  // namespace

void parallel_tasks(int n_tasks, const std::function<void(int)>& fn) {
    WorkerPool::instance().run(n_tasks, fn);
}

int worker_count() { return WorkerPool::instance().size() + 1; }

}  // namespace uforge
