#pragma once

#include <atomic>
#include <condition_variable>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace attreval {

// Persistent worker pool. run(n, fn) executes fn(i) for i in [0,n) with
// dynamic index dispatch; callers must write results into per-index slots so
// any ordered reduction afterwards stays bit-deterministic regardless of the
// worker count or scheduling.
class ThreadPool {
  public:
    explicit ThreadPool(int workers) {
        // results are deterministic for any worker count, so capping at the
        // hardware concurrency only affects speed
        const int hw = static_cast<int>(std::thread::hardware_concurrency());
        const int extra = std::min(workers, std::max(1, hw)) - 1; // caller participates
        for (int w = 0; w < extra; ++w)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mutex_);
            stop_ = true;
        }
        cv_task_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int size() const { return static_cast<int>(threads_.size()) + 1; }

    void run(int n, const std::function<void(int)>& fn) {
        if (n <= 0) return;
        if (threads_.empty() || n == 1) {
            for (int i = 0; i < n; ++i) fn(i);
            return;
        }
        {
            std::lock_guard<std::mutex> lk(mutex_);
            fn_ = &fn;
            total_ = n;
            next_.store(0, std::memory_order_relaxed);
            pending_ = static_cast<int>(threads_.size());
            ++generation_;
        }
        cv_task_.notify_all();
        drain(fn, n);
        std::unique_lock<std::mutex> lk(mutex_);
        cv_done_.wait(lk, [this] { return pending_ == 0; });
        fn_ = nullptr;
        if (error_) {
            auto e = error_;
            error_ = nullptr;
            std::rethrow_exception(e);
        }
    }

  private:
    void drain(const std::function<void(int)>& fn, int n) {
        int i;
        while ((i = next_.fetch_add(1, std::memory_order_relaxed)) < n) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mutex_);
                if (!error_) error_ = std::current_exception();
            }
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* fn = nullptr;
            int total = 0;
            {
                std::unique_lock<std::mutex> lk(mutex_);
                cv_task_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                fn = fn_;
                total = total_;
            }
            drain(*fn, total);
            {
                std::lock_guard<std::mutex> lk(mutex_);
                if (--pending_ == 0) cv_done_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable cv_task_, cv_done_;
    const std::function<void(int)>* fn_ = nullptr;
    std::atomic<int> next_{0};
    int total_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
};

// one-off variant for call sites without a pool; spawns threads per call, so
// only use it for coarse-grained work
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    if (workers <= 1 || n == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    ThreadPool pool(std::min(workers, n));
    pool.run(n, fn);
}

} // namespace attreval
